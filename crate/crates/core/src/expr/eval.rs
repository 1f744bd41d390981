//! Compiled evaluation of expressions over a fixed coordinate ordering.
//!
//! ODE right-hand sides evaluate the same expressions millions of times, so
//! name lookups are resolved once: [`ScalarExpr::bind`] lowers the shared
//! DAG into a register program in topological order (each distinct node is
//! computed exactly once per evaluation).

use std::collections::HashMap;

use super::{Node, ScalarExpr, UnaryFn};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Const(f64),
    Load(u32),
    Sum(Vec<u32>),
    Prod(Vec<u32>),
    Quot(u32, u32),
    Pow(u32, i32),
    Func(UnaryFn, u32),
}

/// An expression compiled against a coordinate list; evaluates over `&[f64]`.
#[derive(Debug, Clone)]
pub struct BoundExpr {
    ops: Vec<Op>,
    n_coords: usize,
}

impl ScalarExpr {
    /// Resolve variable names to slots in `coords`. Fails if a free variable
    /// is not among the coordinates.
    pub fn bind<S: AsRef<str>>(&self, coords: &[S]) -> Result<BoundExpr> {
        let index: HashMap<&str, u32> = coords
            .iter()
            .enumerate()
            .map(|(i, name)| (name.as_ref(), i as u32))
            .collect();
        let mut ops = Vec::new();
        let mut memo: HashMap<usize, u32> = HashMap::new();
        compile(self, &index, &mut ops, &mut memo)?;
        Ok(BoundExpr {
            ops,
            n_coords: coords.len(),
        })
    }
}

fn compile(
    expr: &ScalarExpr,
    index: &HashMap<&str, u32>,
    ops: &mut Vec<Op>,
    memo: &mut HashMap<usize, u32>,
) -> Result<u32> {
    let ptr = expr.node() as *const Node as usize;
    if let Some(slot) = memo.get(&ptr) {
        return Ok(*slot);
    }
    let op = match expr.node() {
        Node::Const(c) => Op::Const(*c),
        Node::Var(name) => Op::Load(
            *index
                .get(name.as_str())
                .ok_or_else(|| Error::UnboundVariable(name.clone()))?,
        ),
        Node::Sum(items) => {
            let slots = items
                .iter()
                .map(|item| compile(item, index, ops, memo))
                .collect::<Result<Vec<_>>>()?;
            Op::Sum(slots)
        }
        Node::Prod(items) => {
            let slots = items
                .iter()
                .map(|item| compile(item, index, ops, memo))
                .collect::<Result<Vec<_>>>()?;
            Op::Prod(slots)
        }
        Node::Quot(a, b) => {
            let sa = compile(a, index, ops, memo)?;
            let sb = compile(b, index, ops, memo)?;
            Op::Quot(sa, sb)
        }
        Node::Pow(a, n) => {
            let sa = compile(a, index, ops, memo)?;
            Op::Pow(sa, *n)
        }
        Node::Func(f, a) => {
            let sa = compile(a, index, ops, memo)?;
            Op::Func(*f, sa)
        }
    };
    ops.push(op);
    let slot = (ops.len() - 1) as u32;
    memo.insert(ptr, slot);
    Ok(slot)
}

impl BoundExpr {
    pub fn n_coords(&self) -> usize {
        self.n_coords
    }

    /// Evaluate at a point, reusing `scratch` as the register file.
    pub fn eval_with(&self, point: &[f64], scratch: &mut Vec<f64>) -> Result<f64> {
        if point.len() != self.n_coords {
            return Err(Error::Dimension(format!(
                "expected {} coordinates, got {}",
                self.n_coords,
                point.len()
            )));
        }
        scratch.clear();
        scratch.reserve(self.ops.len());
        for op in &self.ops {
            let value = match op {
                Op::Const(c) => *c,
                Op::Load(i) => point[*i as usize],
                Op::Sum(slots) => slots.iter().map(|s| scratch[*s as usize]).sum(),
                Op::Prod(slots) => slots.iter().map(|s| scratch[*s as usize]).product(),
                Op::Quot(a, b) => {
                    let den = scratch[*b as usize];
                    if den == 0.0 {
                        return Err(Error::Domain("division by zero".into()));
                    }
                    scratch[*a as usize] / den
                }
                Op::Pow(a, n) => {
                    let base = scratch[*a as usize];
                    if base == 0.0 && *n < 0 {
                        return Err(Error::Domain("zero raised to a negative power".into()));
                    }
                    base.powi(*n)
                }
                Op::Func(f, a) => f.apply(scratch[*a as usize])?,
            };
            scratch.push(value);
        }
        let out = *scratch.last().expect("empty program");
        if out.is_nan() {
            return Err(Error::Domain("evaluation produced NaN".into()));
        }
        Ok(out)
    }

    pub fn eval(&self, point: &[f64]) -> Result<f64> {
        let mut scratch = Vec::new();
        self.eval_with(point, &mut scratch)
    }
}
