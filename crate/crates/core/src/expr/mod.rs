//! A small expression language with exact symbolic differentiation.
//!
//! Every coordinate field in the engine (graph maps `F`, connection
//! coefficients, spray accelerations) is a [`ScalarExpr`]: an immutable tree
//! over named real variables with constants, `+ - * /`, integer powers and
//! the unary functions `sin cos exp log sqrt tanh`. Trees are hash-consed:
//! structurally identical subtrees share one allocation, so structural
//! equality is pointer equality and iterated derivatives stay compact.
//!
//! Construction goes through smart constructors that eagerly fold constants,
//! drop `0`/`1` identities and flatten nested sums and products, so a
//! [`ScalarExpr`] is always in canonical form and [`ScalarExpr::simplify`]
//! is idempotent. Subtraction is canonicalized as addition of a `(-1)`
//! product, which keeps the printer/parser round trip stable.

mod eval;
mod parse;

pub use eval::BoundExpr;
pub use parse::parse_expr;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};

/// Unary functions available in the expression language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryFn {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Tanh,
}

impl UnaryFn {
    pub fn name(self) -> &'static str {
        match self {
            UnaryFn::Sin => "sin",
            UnaryFn::Cos => "cos",
            UnaryFn::Exp => "exp",
            UnaryFn::Log => "log",
            UnaryFn::Sqrt => "sqrt",
            UnaryFn::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => UnaryFn::Sin,
            "cos" => UnaryFn::Cos,
            "exp" => UnaryFn::Exp,
            "log" => UnaryFn::Log,
            "sqrt" => UnaryFn::Sqrt,
            "tanh" => UnaryFn::Tanh,
            _ => return None,
        })
    }

    pub(crate) fn apply(self, x: f64) -> Result<f64> {
        match self {
            UnaryFn::Sin => Ok(x.sin()),
            UnaryFn::Cos => Ok(x.cos()),
            UnaryFn::Exp => Ok(x.exp()),
            UnaryFn::Log => {
                if x <= 0.0 {
                    Err(Error::Domain(format!("log of non-positive value {x}")))
                } else {
                    Ok(x.ln())
                }
            }
            UnaryFn::Sqrt => {
                if x < 0.0 {
                    Err(Error::Domain(format!("sqrt of negative value {x}")))
                } else {
                    Ok(x.sqrt())
                }
            }
            UnaryFn::Tanh => Ok(x.tanh()),
        }
    }
}

/// One node of the canonical expression tree.
///
/// `Sum`/`Prod` are flattened n-ary (never nested within themselves, at most
/// one constant term, at least two operands). There is no subtraction node:
/// `a - b` is stored as `a + (-1)*b`.
#[derive(Debug)]
pub enum Node {
    Const(f64),
    Var(String),
    Sum(Vec<ScalarExpr>),
    Prod(Vec<ScalarExpr>),
    Quot(ScalarExpr, ScalarExpr),
    Pow(ScalarExpr, i32),
    Func(UnaryFn, ScalarExpr),
}

// Shallow equality/hashing: children are compared by pointer, which is
// sound because every child is itself interned.
impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Node::Const(a), Node::Const(b)) => a.to_bits() == b.to_bits(),
            (Node::Var(a), Node::Var(b)) => a == b,
            (Node::Sum(a), Node::Sum(b)) | (Node::Prod(a), Node::Prod(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.ptr_eq(y))
            }
            (Node::Quot(a1, b1), Node::Quot(a2, b2)) => a1.ptr_eq(a2) && b1.ptr_eq(b2),
            (Node::Pow(a, n), Node::Pow(b, m)) => n == m && a.ptr_eq(b),
            (Node::Func(f, a), Node::Func(g, b)) => f == g && a.ptr_eq(b),
            _ => false,
        }
    }
}

impl Eq for Node {}

impl Hash for Node {
    fn hash<H: Hasher>(&self, state: &mut H) {
        std::mem::discriminant(self).hash(state);
        match self {
            Node::Const(c) => c.to_bits().hash(state),
            Node::Var(name) => name.hash(state),
            Node::Sum(items) | Node::Prod(items) => {
                items.len().hash(state);
                for item in items {
                    (Arc::as_ptr(&item.0) as usize).hash(state);
                }
            }
            Node::Quot(a, b) => {
                (Arc::as_ptr(&a.0) as usize).hash(state);
                (Arc::as_ptr(&b.0) as usize).hash(state);
            }
            Node::Pow(a, n) => {
                (Arc::as_ptr(&a.0) as usize).hash(state);
                n.hash(state);
            }
            Node::Func(f, a) => {
                f.hash(state);
                (Arc::as_ptr(&a.0) as usize).hash(state);
            }
        }
    }
}

fn intern_table() -> &'static Mutex<HashSet<Arc<Node>>> {
    static TABLE: OnceLock<Mutex<HashSet<Arc<Node>>>> = OnceLock::new();
    TABLE.get_or_init(|| Mutex::new(HashSet::new()))
}

fn intern(node: Node) -> ScalarExpr {
    let mut table = intern_table().lock().expect("expr intern table poisoned");
    if let Some(existing) = table.get(&node) {
        ScalarExpr(existing.clone())
    } else {
        let arc = Arc::new(node);
        table.insert(arc.clone());
        ScalarExpr(arc)
    }
}

/// An immutable, hash-consed scalar expression over named real variables.
///
/// Cheap to clone and safe to share between threads; evaluation is pure.
#[derive(Debug, Clone)]
pub struct ScalarExpr(Arc<Node>);

impl PartialEq for ScalarExpr {
    fn eq(&self, other: &Self) -> bool {
        self.ptr_eq(other)
    }
}

impl Eq for ScalarExpr {}

impl Hash for ScalarExpr {
    fn hash<H: Hasher>(&self, state: &mut H) {
        (Arc::as_ptr(&self.0) as usize).hash(state);
    }
}

impl ScalarExpr {
    pub fn node(&self) -> &Node {
        &self.0
    }

    fn ptr_eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// The constant value of this expression, if it is a bare constant.
    pub fn as_const(&self) -> Option<f64> {
        match self.node() {
            Node::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn is_one(&self) -> bool {
        self.as_const() == Some(1.0)
    }

    // ---- constructors -----------------------------------------------------

    pub fn constant(c: f64) -> ScalarExpr {
        debug_assert!(!c.is_nan(), "NaN constant in expression");
        // Canonicalize -0.0 so bit-pattern interning does not split zeros.
        let c = if c == 0.0 { 0.0 } else { c };
        intern(Node::Const(c))
    }

    pub fn variable(name: &str) -> ScalarExpr {
        intern(Node::Var(name.to_owned()))
    }

    pub fn zero() -> ScalarExpr {
        ScalarExpr::constant(0.0)
    }

    pub fn one() -> ScalarExpr {
        ScalarExpr::constant(1.0)
    }

    pub fn add(a: &ScalarExpr, b: &ScalarExpr) -> ScalarExpr {
        ScalarExpr::sum(&[a.clone(), b.clone()])
    }

    pub fn sub(a: &ScalarExpr, b: &ScalarExpr) -> ScalarExpr {
        ScalarExpr::add(a, &ScalarExpr::neg(b))
    }

    pub fn neg(a: &ScalarExpr) -> ScalarExpr {
        ScalarExpr::mul(&ScalarExpr::constant(-1.0), a)
    }

    /// Flattening n-ary sum with constant folding.
    pub fn sum(terms: &[ScalarExpr]) -> ScalarExpr {
        let mut flat: Vec<ScalarExpr> = Vec::with_capacity(terms.len());
        let mut acc = 0.0;
        for term in terms {
            match term.node() {
                Node::Const(c) => acc += c,
                Node::Sum(inner) => {
                    // Inner sums are canonical: at most one constant, last.
                    for item in inner {
                        match item.node() {
                            Node::Const(c) => acc += c,
                            _ => flat.push(item.clone()),
                        }
                    }
                }
                _ => flat.push(term.clone()),
            }
        }
        if acc != 0.0 {
            flat.push(ScalarExpr::constant(acc));
        }
        match flat.len() {
            0 => ScalarExpr::zero(),
            1 => flat.pop().unwrap(),
            _ => intern(Node::Sum(flat)),
        }
    }

    /// Flattening n-ary product with constant folding and `0`/`1` rules.
    pub fn mul(a: &ScalarExpr, b: &ScalarExpr) -> ScalarExpr {
        ScalarExpr::product(&[a.clone(), b.clone()])
    }

    pub fn product(factors: &[ScalarExpr]) -> ScalarExpr {
        let mut flat: Vec<ScalarExpr> = Vec::with_capacity(factors.len());
        let mut coeff = 1.0;
        for factor in factors {
            match factor.node() {
                Node::Const(c) => coeff *= c,
                Node::Prod(inner) => {
                    for item in inner {
                        match item.node() {
                            Node::Const(c) => coeff *= c,
                            _ => flat.push(item.clone()),
                        }
                    }
                }
                _ => flat.push(factor.clone()),
            }
        }
        if coeff == 0.0 {
            return ScalarExpr::zero();
        }
        let mut out: Vec<ScalarExpr> = Vec::with_capacity(flat.len() + 1);
        if coeff != 1.0 {
            out.push(ScalarExpr::constant(coeff));
        }
        out.extend(flat);
        match out.len() {
            0 => ScalarExpr::one(),
            1 => out.pop().unwrap(),
            _ => intern(Node::Prod(out)),
        }
    }

    pub fn div(a: &ScalarExpr, b: &ScalarExpr) -> ScalarExpr {
        if a.is_zero() {
            return ScalarExpr::zero();
        }
        if b.is_one() {
            return a.clone();
        }
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            if y != 0.0 && (x / y).is_finite() {
                return ScalarExpr::constant(x / y);
            }
        }
        intern(Node::Quot(a.clone(), b.clone()))
    }

    pub fn powi(a: &ScalarExpr, n: i32) -> ScalarExpr {
        match n {
            0 => return ScalarExpr::one(),
            1 => return a.clone(),
            _ => {}
        }
        if let Some(c) = a.as_const() {
            let v = c.powi(n);
            if v.is_finite() {
                return ScalarExpr::constant(v);
            }
        }
        if let Node::Pow(base, m) = a.node() {
            if let Some(k) = m.checked_mul(n) {
                return ScalarExpr::powi(base, k);
            }
        }
        intern(Node::Pow(a.clone(), n))
    }

    pub fn func(f: UnaryFn, a: &ScalarExpr) -> ScalarExpr {
        if let Some(c) = a.as_const() {
            if let Ok(v) = f.apply(c) {
                if v.is_finite() {
                    return ScalarExpr::constant(v);
                }
            }
        }
        intern(Node::Func(f, a.clone()))
    }

    // ---- structure --------------------------------------------------------

    /// Free variables of the expression, sorted.
    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut seen = HashSet::new();
        self.collect_vars(&mut out, &mut seen);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>, seen: &mut HashSet<usize>) {
        if !seen.insert(self.key()) {
            return;
        }
        match self.node() {
            Node::Const(_) => {}
            Node::Var(name) => {
                out.insert(name.clone());
            }
            Node::Sum(items) | Node::Prod(items) => {
                for item in items {
                    item.collect_vars(out, seen);
                }
            }
            Node::Quot(a, b) => {
                a.collect_vars(out, seen);
                b.collect_vars(out, seen);
            }
            Node::Pow(a, _) => a.collect_vars(out, seen),
            Node::Func(_, a) => a.collect_vars(out, seen),
        }
    }

    /// Number of distinct nodes in the (shared) expression DAG.
    pub fn node_count(&self) -> usize {
        let mut seen = HashSet::new();
        self.count_nodes(&mut seen);
        seen.len()
    }

    fn count_nodes(&self, seen: &mut HashSet<usize>) {
        if !seen.insert(self.key()) {
            return;
        }
        match self.node() {
            Node::Const(_) | Node::Var(_) => {}
            Node::Sum(items) | Node::Prod(items) => {
                for item in items {
                    item.count_nodes(seen);
                }
            }
            Node::Quot(a, b) => {
                a.count_nodes(seen);
                b.count_nodes(seen);
            }
            Node::Pow(a, _) => a.count_nodes(seen),
            Node::Func(_, a) => a.count_nodes(seen),
        }
    }

    // ---- calculus ---------------------------------------------------------

    /// Exact symbolic partial derivative with respect to `var`.
    pub fn differentiate(&self, var: &str) -> ScalarExpr {
        let mut memo = HashMap::new();
        self.diff_memo(var, &mut memo)
    }

    fn diff_memo(&self, var: &str, memo: &mut HashMap<usize, ScalarExpr>) -> ScalarExpr {
        if let Some(hit) = memo.get(&self.key()) {
            return hit.clone();
        }
        let out = match self.node() {
            Node::Const(_) => ScalarExpr::zero(),
            Node::Var(name) => {
                if name == var {
                    ScalarExpr::one()
                } else {
                    ScalarExpr::zero()
                }
            }
            Node::Sum(items) => {
                let parts: Vec<ScalarExpr> =
                    items.iter().map(|item| item.diff_memo(var, memo)).collect();
                ScalarExpr::sum(&parts)
            }
            Node::Prod(items) => {
                // n-ary product rule
                let mut parts = Vec::with_capacity(items.len());
                for (i, item) in items.iter().enumerate() {
                    let di = item.diff_memo(var, memo);
                    if di.is_zero() {
                        continue;
                    }
                    let mut factors: Vec<ScalarExpr> = Vec::with_capacity(items.len());
                    factors.push(di);
                    for (j, other) in items.iter().enumerate() {
                        if j != i {
                            factors.push(other.clone());
                        }
                    }
                    parts.push(ScalarExpr::product(&factors));
                }
                ScalarExpr::sum(&parts)
            }
            Node::Quot(a, b) => {
                let da = a.diff_memo(var, memo);
                let db = b.diff_memo(var, memo);
                let num = ScalarExpr::sub(&ScalarExpr::mul(&da, b), &ScalarExpr::mul(a, &db));
                ScalarExpr::div(&num, &ScalarExpr::powi(b, 2))
            }
            Node::Pow(a, n) => {
                let da = a.diff_memo(var, memo);
                let coeff = ScalarExpr::constant(f64::from(*n));
                ScalarExpr::product(&[coeff, ScalarExpr::powi(a, n - 1), da])
            }
            Node::Func(f, a) => {
                let da = a.diff_memo(var, memo);
                let outer = match f {
                    UnaryFn::Sin => ScalarExpr::func(UnaryFn::Cos, a),
                    UnaryFn::Cos => ScalarExpr::neg(&ScalarExpr::func(UnaryFn::Sin, a)),
                    UnaryFn::Exp => ScalarExpr::func(UnaryFn::Exp, a),
                    UnaryFn::Log => ScalarExpr::div(&ScalarExpr::one(), a),
                    UnaryFn::Sqrt => ScalarExpr::div(
                        &ScalarExpr::constant(0.5),
                        &ScalarExpr::func(UnaryFn::Sqrt, a),
                    ),
                    UnaryFn::Tanh => ScalarExpr::sub(
                        &ScalarExpr::one(),
                        &ScalarExpr::powi(&ScalarExpr::func(UnaryFn::Tanh, a), 2),
                    ),
                };
                ScalarExpr::mul(&outer, &da)
            }
        };
        memo.insert(self.key(), out.clone());
        out
    }

    /// Rebuild through the smart constructors (constant folding, identity
    /// elimination, flattening). Idempotent; never increases the node count.
    pub fn simplify(&self) -> ScalarExpr {
        let mut memo = HashMap::new();
        self.simplify_memo(&mut memo)
    }

    fn simplify_memo(&self, memo: &mut HashMap<usize, ScalarExpr>) -> ScalarExpr {
        if let Some(hit) = memo.get(&self.key()) {
            return hit.clone();
        }
        let out = match self.node() {
            Node::Const(_) | Node::Var(_) => self.clone(),
            Node::Sum(items) => {
                let parts: Vec<ScalarExpr> =
                    items.iter().map(|item| item.simplify_memo(memo)).collect();
                ScalarExpr::sum(&parts)
            }
            Node::Prod(items) => {
                let parts: Vec<ScalarExpr> =
                    items.iter().map(|item| item.simplify_memo(memo)).collect();
                ScalarExpr::product(&parts)
            }
            Node::Quot(a, b) => ScalarExpr::div(&a.simplify_memo(memo), &b.simplify_memo(memo)),
            Node::Pow(a, n) => ScalarExpr::powi(&a.simplify_memo(memo), *n),
            Node::Func(f, a) => ScalarExpr::func(*f, &a.simplify_memo(memo)),
        };
        memo.insert(self.key(), out.clone());
        out
    }

    /// Substitute expressions for variables, rebuilding canonically.
    pub fn substitute(&self, map: &HashMap<String, ScalarExpr>) -> ScalarExpr {
        let mut memo = HashMap::new();
        self.subst_memo(map, &mut memo)
    }

    fn subst_memo(
        &self,
        map: &HashMap<String, ScalarExpr>,
        memo: &mut HashMap<usize, ScalarExpr>,
    ) -> ScalarExpr {
        if let Some(hit) = memo.get(&self.key()) {
            return hit.clone();
        }
        let out = match self.node() {
            Node::Const(_) => self.clone(),
            Node::Var(name) => map.get(name).cloned().unwrap_or_else(|| self.clone()),
            Node::Sum(items) => {
                let parts: Vec<ScalarExpr> = items
                    .iter()
                    .map(|item| item.subst_memo(map, memo))
                    .collect();
                ScalarExpr::sum(&parts)
            }
            Node::Prod(items) => {
                let parts: Vec<ScalarExpr> = items
                    .iter()
                    .map(|item| item.subst_memo(map, memo))
                    .collect();
                ScalarExpr::product(&parts)
            }
            Node::Quot(a, b) => ScalarExpr::div(&a.subst_memo(map, memo), &b.subst_memo(map, memo)),
            Node::Pow(a, n) => ScalarExpr::powi(&a.subst_memo(map, memo), *n),
            Node::Func(f, a) => ScalarExpr::func(*f, &a.subst_memo(map, memo)),
        };
        memo.insert(self.key(), out.clone());
        out
    }

    /// Rename variables (a substitution by bare variables).
    pub fn rename_vars(&self, map: &HashMap<String, String>) -> ScalarExpr {
        let exprs: HashMap<String, ScalarExpr> = map
            .iter()
            .map(|(from, to)| (from.clone(), ScalarExpr::variable(to)))
            .collect();
        self.substitute(&exprs)
    }

    // ---- evaluation -------------------------------------------------------

    /// Evaluate against name/value bindings. Every free variable must be
    /// bound; partial-function violations are reported as errors, never NaN.
    pub fn eval(&self, bindings: &[(&str, f64)]) -> Result<f64> {
        let mut memo = HashMap::new();
        self.eval_memo(bindings, &mut memo)
    }

    fn eval_memo(&self, bindings: &[(&str, f64)], memo: &mut HashMap<usize, f64>) -> Result<f64> {
        if let Some(hit) = memo.get(&self.key()) {
            return Ok(*hit);
        }
        let out = match self.node() {
            Node::Const(c) => *c,
            Node::Var(name) => bindings
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::UnboundVariable(name.clone()))?,
            Node::Sum(items) => {
                let mut acc = 0.0;
                for item in items {
                    acc += item.eval_memo(bindings, memo)?;
                }
                acc
            }
            Node::Prod(items) => {
                let mut acc = 1.0;
                for item in items {
                    acc *= item.eval_memo(bindings, memo)?;
                }
                acc
            }
            Node::Quot(a, b) => {
                let den = b.eval_memo(bindings, memo)?;
                if den == 0.0 {
                    return Err(Error::Domain("division by zero".into()));
                }
                a.eval_memo(bindings, memo)? / den
            }
            Node::Pow(a, n) => {
                let base = a.eval_memo(bindings, memo)?;
                if base == 0.0 && *n < 0 {
                    return Err(Error::Domain("zero raised to a negative power".into()));
                }
                base.powi(*n)
            }
            Node::Func(f, a) => f.apply(a.eval_memo(bindings, memo)?)?,
        };
        memo.insert(self.key(), out);
        Ok(out)
    }
}

impl fmt::Display for ScalarExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", print_expr(self))
    }
}

// ---- canonical printing ----------------------------------------------------
//
// The printer emits text that re-parses to the identical (interned) tree:
// sums merge negative-coefficient terms into binary minus, products print a
// leading negative constant as a prefix minus, and parentheses are inserted
// exactly where the grammar needs them.

/// Split a term into (negated?, magnitude rendering) for use inside a sum.
fn render_term(term: &ScalarExpr) -> (bool, String) {
    match term.node() {
        Node::Const(c) if *c < 0.0 => (true, format!("{}", -c)),
        Node::Prod(items) => {
            if let Node::Const(c) = items[0].node() {
                if *c < 0.0 {
                    let flipped = if *c == -1.0 && items.len() == 2 {
                        items[1].clone()
                    } else if *c == -1.0 {
                        intern(Node::Prod(items[1..].to_vec()))
                    } else {
                        let mut repl = items.clone();
                        repl[0] = ScalarExpr::constant(-c);
                        intern(Node::Prod(repl))
                    };
                    return (true, print_prec(&flipped, 2));
                }
            }
            (false, print_prec(term, 2))
        }
        _ => (false, print_prec(term, 2)),
    }
}

fn precedence(e: &ScalarExpr) -> u8 {
    match e.node() {
        Node::Sum(_) => 1,
        Node::Prod(_) | Node::Quot(_, _) => 2,
        Node::Pow(_, _) => 3,
        Node::Const(c) if *c < 0.0 => 1, // forces parens in tight spots
        _ => 4,
    }
}

fn print_prec(e: &ScalarExpr, min_prec: u8) -> String {
    let body = print_expr(e);
    if precedence(e) < min_prec {
        format!("({body})")
    } else {
        body
    }
}

fn print_expr(e: &ScalarExpr) -> String {
    match e.node() {
        Node::Const(c) => format!("{c}"),
        Node::Var(name) => name.clone(),
        Node::Sum(items) => {
            let mut out = String::new();
            for (i, item) in items.iter().enumerate() {
                let (neg, body) = render_term(item);
                if i == 0 {
                    if neg {
                        out.push('-');
                    }
                    out.push_str(&body);
                } else {
                    out.push_str(if neg { " - " } else { " + " });
                    out.push_str(&body);
                }
            }
            out
        }
        Node::Prod(items) => {
            let mut out = String::new();
            let mut rest: &[ScalarExpr] = items;
            if let Node::Const(c) = items[0].node() {
                if *c == -1.0 {
                    out.push('-');
                    rest = &items[1..];
                    if rest.len() == 1 {
                        out.push_str(&print_prec(&rest[0], 3));
                        return out;
                    }
                } else if *c < 0.0 {
                    out.push_str(&format!("-{}", -c));
                    rest = &items[1..];
                    out.push('*');
                }
            }
            let parts: Vec<String> = rest.iter().map(|f| print_prec(f, 3)).collect();
            out.push_str(&parts.join("*"));
            out
        }
        Node::Quot(a, b) => {
            // Left-associative '/' chains re-parse correctly without parens
            // on a Quot/Prod numerator, except that a negative leading
            // coefficient must be parenthesized so the prefix minus does not
            // swallow the whole quotient on re-parse.
            let num = match a.node() {
                Node::Prod(items) if !matches!(items[0].node(), Node::Const(c) if *c < 0.0) => {
                    print_expr(a)
                }
                Node::Quot(_, _) => print_expr(a),
                _ => print_prec(a, 3),
            };
            format!("{}/{}", num, print_prec(b, 3))
        }
        Node::Pow(a, n) => format!("{}^{}", print_prec(a, 4), n),
        Node::Func(f, a) => format!("{}({})", f.name(), print_expr(a)),
    }
}
