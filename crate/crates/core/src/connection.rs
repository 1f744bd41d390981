//! Connections on trivial bundles `U x R^r` over a chart `U` in `R^n`, given
//! by coefficient matrices: `nabla_{d_i} s = d_i s + omega_i s`. For a
//! tangent-bundle connection (`r = n`) the Christoffel symbols are
//! `Gamma^a_{i b} = (omega_i)^a_b` (layout `[a][i][b]` when supplied as a
//! Christoffel array: upper index, derivative index, lower index).
//!
//! Coordinate curvature convention: `R(d_i, d_j) = R_{ij}` with
//! `R_{ij} = d_i omega_j - d_j omega_i + [omega_i, omega_j]`.

use std::sync::OnceLock;

use nalgebra::DMatrix;

use crate::distribution::GraphDistribution;
use crate::error::{Error, Result};
use crate::expr::{BoundExpr, ScalarExpr};
use crate::geometry::{integrate_ode, BoxDomain, CurveSolution};

/// Coordinate names `x1..xn` used by all connection coefficient fields.
pub fn chart_coords(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("x{i}")).collect()
}

/// A connection on the trivial bundle `U x R^r`, `U` an open box in `R^n`.
#[derive(Debug, Clone)]
pub struct BundleConnection {
    base_dim: usize,
    fiber_rank: usize,
    /// `omega[i][a][b]`: coefficient matrices, one `r x r` matrix per base
    /// direction.
    omega: Vec<Vec<Vec<ScalarExpr>>>,
    domain: BoxDomain,
    coords: Vec<String>,
    tangent: bool,
    bound: OnceLock<Vec<Vec<Vec<BoundExpr>>>>,
}

impl BundleConnection {
    pub fn new(
        base_dim: usize,
        fiber_rank: usize,
        omega: Vec<Vec<Vec<ScalarExpr>>>,
        domain: BoxDomain,
        tangent: bool,
    ) -> Result<Self> {
        if domain.dim() != base_dim {
            return Err(Error::Dimension(format!(
                "domain dimension {} != base dimension {base_dim}",
                domain.dim()
            )));
        }
        if tangent && fiber_rank != base_dim {
            return Err(Error::NotTangent {
                fiber_rank,
                base_dim,
            });
        }
        if omega.len() != base_dim
            || omega
                .iter()
                .any(|m| m.len() != fiber_rank || m.iter().any(|row| row.len() != fiber_rank))
        {
            return Err(Error::Dimension(format!(
                "omega must be {base_dim} matrices of size {fiber_rank} x {fiber_rank}"
            )));
        }
        let coords = chart_coords(base_dim);
        for (i, mat) in omega.iter().enumerate() {
            for (a, row) in mat.iter().enumerate() {
                for (b, entry) in row.iter().enumerate() {
                    for var in entry.free_vars() {
                        if !coords.contains(&var) {
                            return Err(Error::Dimension(format!(
                                "omega[{i}][{a}][{b}] uses `{var}` outside x1..x{base_dim}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(BundleConnection {
            base_dim,
            fiber_rank,
            omega,
            domain,
            coords,
            tangent,
            bound: OnceLock::new(),
        })
    }

    /// Tangent-bundle connection from Christoffel symbols laid out as
    /// `gamma[a][i][j] = Gamma^a_{ij}` (upper, derivative, lower).
    pub fn from_christoffel(
        n: usize,
        gamma: Vec<Vec<Vec<ScalarExpr>>>,
        domain: BoxDomain,
    ) -> Result<Self> {
        if gamma.len() != n
            || gamma
                .iter()
                .any(|m| m.len() != n || m.iter().any(|r| r.len() != n))
        {
            return Err(Error::Dimension(format!(
                "christoffel must be an {n} x {n} x {n} array"
            )));
        }
        let mut omega = vec![vec![vec![ScalarExpr::zero(); n]; n]; n];
        for a in 0..n {
            for i in 0..n {
                for j in 0..n {
                    omega[i][a][j] = gamma[a][i][j].clone();
                }
            }
        }
        BundleConnection::new(n, n, omega, domain, true)
    }

    /// Christoffel symbols from string expressions, `gamma[a][i][j]`.
    pub fn from_christoffel_strs(
        n: usize,
        gamma: &[Vec<Vec<&str>>],
        domain: BoxDomain,
    ) -> Result<Self> {
        let coords = chart_coords(n);
        let parsed = gamma
            .iter()
            .map(|plane| {
                plane
                    .iter()
                    .map(|row| {
                        row.iter()
                            .map(|s| crate::expr::parse_expr(s, &coords))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        BundleConnection::from_christoffel(n, parsed, domain)
    }

    /// Flat connection (`omega = 0`).
    pub fn flat(
        base_dim: usize,
        fiber_rank: usize,
        domain: BoxDomain,
        tangent: bool,
    ) -> Result<Self> {
        let omega = vec![vec![vec![ScalarExpr::zero(); fiber_rank]; fiber_rank]; base_dim];
        BundleConnection::new(base_dim, fiber_rank, omega, domain, tangent)
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn fiber_rank(&self) -> usize {
        self.fiber_rank
    }

    pub fn is_tangent(&self) -> bool {
        self.tangent
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn coords(&self) -> &[String] {
        &self.coords
    }

    pub fn omega(&self) -> &Vec<Vec<Vec<ScalarExpr>>> {
        &self.omega
    }

    pub fn gamma(&self, a: usize, i: usize, j: usize) -> &ScalarExpr {
        &self.omega[i][a][j]
    }

    fn bound(&self) -> &Vec<Vec<Vec<BoundExpr>>> {
        self.bound.get_or_init(|| {
            self.omega
                .iter()
                .map(|m| {
                    m.iter()
                        .map(|row| {
                            row.iter()
                                .map(|e| e.bind(&self.coords).expect("validated"))
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
    }

    /// Coefficient matrices evaluated at a base point.
    pub fn omega_at(&self, x: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        self.domain.check(x)?;
        let mut scratch = Vec::new();
        let r = self.fiber_rank;
        self.bound()
            .iter()
            .map(|m| {
                let mut out = DMatrix::zeros(r, r);
                for a in 0..r {
                    for b in 0..r {
                        out[(a, b)] = m[a][b].eval_with(x, &mut scratch)?;
                    }
                }
                Ok(out)
            })
            .collect()
    }

    /// `sum_i v^i omega_i(x)`: the connection matrix along a velocity.
    pub fn omega_along(&self, x: &[f64], velocity: &[f64]) -> Result<DMatrix<f64>> {
        let mats = self.omega_at(x)?;
        let mut out = DMatrix::zeros(self.fiber_rank, self.fiber_rank);
        for (vi, m) in velocity.iter().zip(&mats) {
            out += m * *vi;
        }
        Ok(out)
    }

    /// `nabla_{d_i} s = d_i s + omega_i s`, symbolic.
    pub fn covariant_derivative(
        &self,
        section: &[ScalarExpr],
        i: usize,
    ) -> Result<Vec<ScalarExpr>> {
        if section.len() != self.fiber_rank {
            return Err(Error::Dimension(format!(
                "section has {} components, fiber rank is {}",
                section.len(),
                self.fiber_rank
            )));
        }
        if i >= self.base_dim {
            return Err(Error::Dimension(format!(
                "direction index {i} out of range"
            )));
        }
        let mut out = Vec::with_capacity(self.fiber_rank);
        for a in 0..self.fiber_rank {
            let mut terms = vec![section[a].differentiate(&self.coords[i])];
            for b in 0..self.fiber_rank {
                terms.push(ScalarExpr::mul(&self.omega[i][a][b], &section[b]));
            }
            out.push(ScalarExpr::sum(&terms).simplify());
        }
        Ok(out)
    }

    /// Curvature `R_{ij} = d_i omega_j - d_j omega_i + [omega_i, omega_j]`
    /// as an operator-valued 2-tensor.
    pub fn curvature(&self) -> TensorFieldExpr {
        let n = self.base_dim;
        let r = self.fiber_rank;
        let mut tensor = TensorFieldExpr::zeros(n, 2, FiberShape::Operator(r));
        for i in 0..n {
            for j in 0..n {
                for a in 0..r {
                    for b in 0..r {
                        let mut terms = vec![
                            self.omega[j][a][b].differentiate(&self.coords[i]),
                            ScalarExpr::neg(&self.omega[i][a][b].differentiate(&self.coords[j])),
                        ];
                        for c in 0..r {
                            terms.push(ScalarExpr::mul(&self.omega[i][a][c], &self.omega[j][c][b]));
                            terms.push(ScalarExpr::neg(&ScalarExpr::mul(
                                &self.omega[j][a][c],
                                &self.omega[i][c][b],
                            )));
                        }
                        let expr = ScalarExpr::sum(&terms).simplify();
                        tensor.set(&[i, j], &[a, b], expr);
                    }
                }
            }
        }
        tensor
    }

    /// Torsion `T^a_{ij} = Gamma^a_{ij} - Gamma^a_{ji}` (tangent only).
    pub fn torsion(&self) -> Result<TensorFieldExpr> {
        if !self.tangent {
            return Err(Error::NotTangent {
                fiber_rank: self.fiber_rank,
                base_dim: self.base_dim,
            });
        }
        let n = self.base_dim;
        let mut tensor = TensorFieldExpr::zeros(n, 2, FiberShape::Vector(n));
        for i in 0..n {
            for j in 0..n {
                for a in 0..n {
                    let expr = ScalarExpr::sub(&self.omega[i][a][j], &self.omega[j][a][i]);
                    tensor.set(&[i, j], &[a], expr);
                }
            }
        }
        Ok(tensor)
    }

    /// Parallel transport of `s0` along a base curve: solves
    /// `s' + (sum_i gamma'^i omega_i(gamma(t))) s = 0`.
    ///
    /// The curve is supplied as `t -> (point, velocity)`.
    pub fn parallel_transport<C>(
        &self,
        curve: C,
        s0: &[f64],
        t_span: (f64, f64),
        step: f64,
    ) -> Result<CurveSolution>
    where
        C: Fn(f64) -> Result<(Vec<f64>, Vec<f64>)>,
    {
        if s0.len() != self.fiber_rank {
            return Err(Error::Dimension("initial section has wrong rank".into()));
        }
        integrate_ode(
            |t: f64, s: &[f64], ds: &mut [f64]| {
                let (x, v) = curve(t)?;
                let a = self.omega_along(&x, &v)?;
                for row in 0..self.fiber_rank {
                    let mut acc = 0.0;
                    for col in 0..self.fiber_rank {
                        acc -= a[(row, col)] * s[col];
                    }
                    ds[row] = acc;
                }
                Ok(())
            },
            s0,
            t_span,
            step,
        )
    }

    /// Transport the full fiber frame: dense solution of `P' = -A(t) P`,
    /// `P(0) = I`, state flattened row-major. One solve per curve replaces
    /// `r` per-vector transports.
    pub fn transport_frame<C>(
        &self,
        curve: C,
        t_span: (f64, f64),
        step: f64,
    ) -> Result<CurveSolution>
    where
        C: Fn(f64) -> Result<(Vec<f64>, Vec<f64>)>,
    {
        let r = self.fiber_rank;
        let mut p0 = vec![0.0; r * r];
        for d in 0..r {
            p0[d * r + d] = 1.0;
        }
        integrate_ode(
            |t: f64, p: &[f64], dp: &mut [f64]| {
                let (x, v) = curve(t)?;
                let a = self.omega_along(&x, &v)?;
                for row in 0..r {
                    for col in 0..r {
                        let mut acc = 0.0;
                        for c in 0..r {
                            acc -= a[(row, c)] * p[c * r + col];
                        }
                        dp[row * r + col] = acc;
                    }
                }
                Ok(())
            },
            &p0,
            t_span,
            step,
        )
    }

    /// End-point transport matrix along a curve.
    pub fn transport_matrix<C>(
        &self,
        curve: C,
        t_span: (f64, f64),
        step: f64,
    ) -> Result<DMatrix<f64>>
    where
        C: Fn(f64) -> Result<(Vec<f64>, Vec<f64>)>,
    {
        let sol = self.transport_frame(curve, t_span, step)?;
        Ok(frame_state_to_matrix(sol.end_state(), self.fiber_rank))
    }

    /// Dual connection on `E^*`: `omega*_i = -omega_i^T`.
    pub fn dual_connection(&self) -> BundleConnection {
        let r = self.fiber_rank;
        let omega = self
            .omega
            .iter()
            .map(|m| {
                (0..r)
                    .map(|a| (0..r).map(|b| ScalarExpr::neg(&m[b][a])).collect())
                    .collect()
            })
            .collect();
        BundleConnection::new(self.base_dim, r, omega, self.domain.clone(), false)
            .expect("dual of a valid connection")
    }

    /// Induced connection on bilinear forms (`E^* (x) E^*`), fiber rank
    /// `r^2`: `nabla^_i G = d_i G - omega_i^T G - G omega_i` in matrix form.
    /// Fiber index layout: `(a, b) -> a * r + b` (row-major).
    pub fn bilinear_connection(&self) -> BundleConnection {
        let r = self.fiber_rank;
        let rr = r * r;
        let mut omega = vec![vec![vec![ScalarExpr::zero(); rr]; rr]; self.base_dim];
        for i in 0..self.base_dim {
            for a in 0..r {
                for b in 0..r {
                    let row = a * r + b;
                    for c in 0..r {
                        for d in 0..r {
                            let col = c * r + d;
                            let mut terms = Vec::new();
                            if d == b {
                                terms.push(ScalarExpr::neg(&self.omega[i][c][a]));
                            }
                            if c == a {
                                terms.push(ScalarExpr::neg(&self.omega[i][d][b]));
                            }
                            if !terms.is_empty() {
                                omega[i][row][col] = ScalarExpr::sum(&terms);
                            }
                        }
                    }
                }
            }
        }
        BundleConnection::new(self.base_dim, rr, omega, self.domain.clone(), false)
            .expect("bilinear of a valid connection")
    }

    /// The connection's horizontal distribution as a graph distribution on
    /// base x fiber coordinates: `F_(x, xi)(v) = -(sum_i v^i omega_i(x)) xi`.
    pub fn horizontal_distribution(&self, fiber_box: BoxDomain) -> Result<GraphDistribution> {
        if fiber_box.dim() != self.fiber_rank {
            return Err(Error::Dimension("fiber box has wrong dimension".into()));
        }
        let n = self.base_dim;
        let r = self.fiber_rank;
        let mut f = vec![vec![ScalarExpr::zero(); n]; r];
        for alpha in 0..r {
            for i in 0..n {
                let terms: Vec<ScalarExpr> = (0..r)
                    .map(|b| {
                        ScalarExpr::neg(&ScalarExpr::mul(
                            &self.omega[i][alpha][b],
                            &ScalarExpr::variable(&format!("y{}", b + 1)),
                        ))
                    })
                    .collect();
                f[alpha][i] = ScalarExpr::sum(&terms).simplify();
            }
        }
        GraphDistribution::new(n, r, f, self.domain.product(&fiber_box))
    }

    /// Max torsion magnitude sampled at the given points (tangent only).
    pub fn torsion_residual_at(&self, points: &[Vec<f64>]) -> Result<f64> {
        let torsion = self.torsion()?;
        let mut worst = 0.0f64;
        for p in points {
            let val = torsion.eval_at(p)?;
            worst = worst.max(val.max_abs());
        }
        Ok(worst)
    }
}

pub fn frame_state_to_matrix(state: &[f64], r: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, r, |row, col| state[row * r + col])
}

// ---------------------------------------------------------------------------
// Tensor fields
// ---------------------------------------------------------------------------

/// Shape of the fiber part of a tensor field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FiberShape {
    /// `E`-valued: one fiber index (e.g. torsion).
    Vector(usize),
    /// `Lin(E)`-valued: two fiber indices (e.g. curvature).
    Operator(usize),
}

impl FiberShape {
    pub fn len(&self) -> usize {
        match self {
            FiberShape::Vector(r) => *r,
            FiberShape::Operator(r) => r * r,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            FiberShape::Vector(r) | FiberShape::Operator(r) => *r,
        }
    }
}

/// A covariant tensor field with expression components, stored densely:
/// covariant multi-index (row-major over the base dimension), then fiber.
#[derive(Debug, Clone)]
pub struct TensorFieldExpr {
    base_dim: usize,
    cov_arity: usize,
    fiber: FiberShape,
    coords: Vec<String>,
    comps: Vec<ScalarExpr>,
    bound: OnceLock<Vec<BoundExpr>>,
}

impl TensorFieldExpr {
    pub fn zeros(base_dim: usize, cov_arity: usize, fiber: FiberShape) -> Self {
        let size = base_dim.pow(cov_arity as u32) * fiber.len();
        TensorFieldExpr {
            base_dim,
            cov_arity,
            fiber,
            coords: chart_coords(base_dim),
            comps: vec![ScalarExpr::zero(); size],
            bound: OnceLock::new(),
        }
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn cov_arity(&self) -> usize {
        self.cov_arity
    }

    pub fn fiber(&self) -> FiberShape {
        self.fiber
    }

    fn flat_index(&self, cov: &[usize], fiber: &[usize]) -> usize {
        debug_assert_eq!(cov.len(), self.cov_arity);
        let mut idx = 0usize;
        for &i in cov {
            debug_assert!(i < self.base_dim);
            idx = idx * self.base_dim + i;
        }
        let fiber_flat = match self.fiber {
            FiberShape::Vector(_) => fiber[0],
            FiberShape::Operator(r) => fiber[0] * r + fiber[1],
        };
        idx * self.fiber.len() + fiber_flat
    }

    pub fn set(&mut self, cov: &[usize], fiber: &[usize], expr: ScalarExpr) {
        debug_assert!(self.bound.get().is_none(), "tensor already bound");
        let idx = self.flat_index(cov, fiber);
        self.comps[idx] = expr;
    }

    pub fn component(&self, cov: &[usize], fiber: &[usize]) -> &ScalarExpr {
        &self.comps[self.flat_index(cov, fiber)]
    }

    pub fn components(&self) -> &[ScalarExpr] {
        &self.comps
    }

    pub fn node_total(&self) -> usize {
        self.comps.iter().map(|c| c.node_count()).sum()
    }

    fn bound(&self) -> &Vec<BoundExpr> {
        self.bound.get_or_init(|| {
            self.comps
                .iter()
                .map(|c| c.bind(&self.coords).expect("validated"))
                .collect()
        })
    }

    /// Evaluate all components at a base point.
    pub fn eval_at(&self, x: &[f64]) -> Result<TensorValue> {
        let mut scratch = Vec::new();
        let values = self
            .bound()
            .iter()
            .map(|b| b.eval_with(x, &mut scratch))
            .collect::<Result<Vec<_>>>()?;
        Ok(TensorValue {
            base_dim: self.base_dim,
            cov_arity: self.cov_arity,
            fiber: self.fiber,
            values,
        })
    }
}

/// A tensor field evaluated at one point.
#[derive(Debug, Clone)]
pub struct TensorValue {
    base_dim: usize,
    cov_arity: usize,
    fiber: FiberShape,
    values: Vec<f64>,
}

impl TensorValue {
    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn cov_arity(&self) -> usize {
        self.cov_arity
    }

    pub fn fiber(&self) -> FiberShape {
        self.fiber
    }

    fn cov_flat(&self, cov: &[usize]) -> usize {
        let mut idx = 0usize;
        for &i in cov {
            idx = idx * self.base_dim + i;
        }
        idx
    }

    pub fn get(&self, cov: &[usize], fiber: &[usize]) -> f64 {
        let fiber_flat = match self.fiber {
            FiberShape::Vector(_) => fiber[0],
            FiberShape::Operator(r) => fiber[0] * r + fiber[1],
        };
        self.values[self.cov_flat(cov) * self.fiber.len() + fiber_flat]
    }

    /// The fiber operator at a covariant multi-index (Operator shape).
    pub fn operator(&self, cov: &[usize]) -> DMatrix<f64> {
        let r = self.fiber.rank();
        let base = self.cov_flat(cov) * self.fiber.len();
        DMatrix::from_fn(r, r, |a, b| self.values[base + a * r + b])
    }

    /// The fiber vector at a covariant multi-index (Vector shape).
    pub fn vector(&self, cov: &[usize]) -> Vec<f64> {
        let len = self.fiber.len();
        let base = self.cov_flat(cov) * len;
        self.values[base..base + len].to_vec()
    }

    pub fn max_abs(&self) -> f64 {
        crate::geometry::inf_norm(&self.values)
    }

    /// Iterate all covariant multi-indices.
    pub fn cov_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..self.cov_arity {
            let mut next = Vec::with_capacity(out.len() * self.base_dim);
            for prefix in &out {
                for i in 0..self.base_dim {
                    let mut idx = prefix.clone();
                    idx.push(i);
                    next.push(idx);
                }
            }
            out = next;
        }
        out
    }
}

/// One covariant-derivative application: adds a covariant slot in front,
/// with fiber corrections from `fiber_conn` and slot corrections from
/// `tangent_conn`:
///
/// ```text
/// (nabla tau)(e_j, I) = d_j tau_I + omega_j-action(tau_I)
///                       - sum_l Gamma^p_{j, I_l} tau_{I_1 .. p .. I_s}
/// ```
pub fn covariant_derivative_tensor(
    tangent_conn: &BundleConnection,
    fiber_conn: &BundleConnection,
    tensor: &TensorFieldExpr,
    order: usize,
    budget: usize,
) -> Result<TensorFieldExpr> {
    if !tangent_conn.is_tangent() {
        return Err(Error::NotTangent {
            fiber_rank: tangent_conn.fiber_rank(),
            base_dim: tangent_conn.base_dim(),
        });
    }
    if order == 0 {
        return Err(Error::Invalid("derivative order must be >= 1".into()));
    }
    let n = tensor.base_dim();
    if tangent_conn.base_dim() != n || fiber_conn.base_dim() != n {
        return Err(Error::Dimension(
            "connection/tensor base dims differ".into(),
        ));
    }
    if fiber_conn.fiber_rank() != tensor.fiber().rank() {
        return Err(Error::Dimension(
            "fiber connection rank != tensor fiber rank".into(),
        ));
    }
    let mut current = tensor.clone();
    for completed in 0..order {
        let next = derive_once(tangent_conn, fiber_conn, &current)?;
        if next.node_total() > budget {
            return Err(Error::ExpressionBudget {
                completed_order: completed,
            });
        }
        current = next;
    }
    Ok(current)
}

fn derive_once(
    tangent_conn: &BundleConnection,
    fiber_conn: &BundleConnection,
    tensor: &TensorFieldExpr,
) -> Result<TensorFieldExpr> {
    let n = tensor.base_dim();
    let s = tensor.cov_arity();
    let fiber = tensor.fiber();
    let coords = chart_coords(n);
    let mut out = TensorFieldExpr::zeros(n, s + 1, fiber);

    let fiber_indices: Vec<Vec<usize>> = match fiber {
        FiberShape::Vector(r) => (0..r).map(|a| vec![a]).collect(),
        FiberShape::Operator(r) => {
            let mut v = Vec::with_capacity(r * r);
            for a in 0..r {
                for b in 0..r {
                    v.push(vec![a, b]);
                }
            }
            v
        }
    };
    let mut cov_indices = vec![vec![]];
    for _ in 0..s {
        let mut next = Vec::with_capacity(cov_indices.len() * n);
        for prefix in &cov_indices {
            for i in 0..n {
                let mut idx = prefix.clone();
                idx.push(i);
                next.push(idx);
            }
        }
        cov_indices = next;
    }

    for j in 0..n {
        for cov in &cov_indices {
            for fib in &fiber_indices {
                let mut terms = vec![tensor.component(cov, fib).differentiate(&coords[j])];
                // fiber corrections
                match fiber {
                    FiberShape::Vector(r) => {
                        let a = fib[0];
                        for b in 0..r {
                            terms.push(ScalarExpr::mul(
                                &fiber_conn.omega()[j][a][b],
                                tensor.component(cov, &[b]),
                            ));
                        }
                    }
                    FiberShape::Operator(r) => {
                        let (a, b) = (fib[0], fib[1]);
                        for c in 0..r {
                            terms.push(ScalarExpr::mul(
                                &fiber_conn.omega()[j][a][c],
                                tensor.component(cov, &[c, b]),
                            ));
                            terms.push(ScalarExpr::neg(&ScalarExpr::mul(
                                tensor.component(cov, &[a, c]),
                                &fiber_conn.omega()[j][c][b],
                            )));
                        }
                    }
                }
                // covariant slot corrections
                for (l, &il) in cov.iter().enumerate() {
                    for p in 0..n {
                        let mut swapped = cov.clone();
                        swapped[l] = p;
                        terms.push(ScalarExpr::neg(&ScalarExpr::mul(
                            tangent_conn.gamma(p, j, il),
                            tensor.component(&swapped, fib),
                        )));
                    }
                }
                let mut full_cov = Vec::with_capacity(s + 1);
                full_cov.push(j);
                full_cov.extend_from_slice(cov);
                out.set(&full_cov, fib, ScalarExpr::sum(&terms).simplify());
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Induced connections over products and pull-backs
// ---------------------------------------------------------------------------

/// A smooth map `R^p -> R^n` with expression components over `x1..xp`.
#[derive(Debug, Clone)]
pub struct MapExpr {
    pub source_dim: usize,
    pub target_dim: usize,
    pub components: Vec<ScalarExpr>,
    pub domain: BoxDomain,
}

impl MapExpr {
    pub fn new(
        source_dim: usize,
        target_dim: usize,
        components: Vec<ScalarExpr>,
        domain: BoxDomain,
    ) -> Result<Self> {
        if components.len() != target_dim || domain.dim() != source_dim {
            return Err(Error::Dimension("map component/domain mismatch".into()));
        }
        let coords = chart_coords(source_dim);
        for comp in &components {
            for var in comp.free_vars() {
                if !coords.contains(&var) {
                    return Err(Error::Dimension(format!(
                        "map component uses `{var}` outside x1..x{source_dim}"
                    )));
                }
            }
        }
        Ok(MapExpr {
            source_dim,
            target_dim,
            components,
            domain,
        })
    }
}

/// Pull-back connection: `(f* omega)_j = sum_i (d_j f^i) (omega_i o f)`.
pub fn pullback_connection(conn: &BundleConnection, f: &MapExpr) -> Result<BundleConnection> {
    if f.target_dim != conn.base_dim() {
        return Err(Error::Dimension(
            "map target dim != connection base dim".into(),
        ));
    }
    let p = f.source_dim;
    let n = conn.base_dim();
    let r = conn.fiber_rank();
    let src_coords = chart_coords(p);
    let tgt_coords = chart_coords(n);
    let subst: std::collections::HashMap<String, ScalarExpr> = tgt_coords
        .iter()
        .cloned()
        .zip(f.components.iter().cloned())
        .collect();
    let mut omega = vec![vec![vec![ScalarExpr::zero(); r]; r]; p];
    for j in 0..p {
        let dfs: Vec<ScalarExpr> = f
            .components
            .iter()
            .map(|c| c.differentiate(&src_coords[j]))
            .collect();
        for a in 0..r {
            for b in 0..r {
                let terms: Vec<ScalarExpr> = (0..n)
                    .map(|i| ScalarExpr::mul(&dfs[i], &conn.omega()[i][a][b].substitute(&subst)))
                    .collect();
                omega[j][a][b] = ScalarExpr::sum(&terms).simplify();
            }
        }
    }
    BundleConnection::new(p, r, omega, f.domain.clone(), false)
}

/// Induced connection on `Lin(TM, TN)` over the product chart: for an
/// `m x n` matrix field `sigma` on `M x N`,
/// `nabla_(v, w) sigma = d sigma + omega^N_w sigma - sigma omega^M_v`.
///
/// Product coordinates are `x1..xn` (M factor) followed by `x(n+1)..x(n+m)`
/// (N factor, renamed); fiber index layout `(a, b) -> a * n + b` with `a`
/// the N index and `b` the M index.
pub fn hom_connection(
    conn_m: &BundleConnection,
    conn_n: &BundleConnection,
) -> Result<BundleConnection> {
    if !conn_m.is_tangent() || !conn_n.is_tangent() {
        return Err(Error::NotTangent {
            fiber_rank: conn_m.fiber_rank(),
            base_dim: conn_m.base_dim(),
        });
    }
    let n = conn_m.base_dim();
    let m = conn_n.base_dim();
    let rank = m * n;
    // rename N-factor coordinates x_j -> x_{n + j}
    let rename: std::collections::HashMap<String, String> = (1..=m)
        .map(|j| (format!("x{j}"), format!("x{}", n + j)))
        .collect();
    let mut omega = vec![vec![vec![ScalarExpr::zero(); rank]; rank]; n + m];
    for i in 0..n {
        // base direction e_i on M: action sigma -> -sigma omega^M_i
        for a in 0..m {
            for b in 0..n {
                let row = a * n + b;
                for d in 0..n {
                    let col = a * n + d;
                    let entry = ScalarExpr::neg(&conn_m.omega()[i][d][b]);
                    if !entry.is_zero() {
                        omega[i][row][col] = entry;
                    }
                }
            }
        }
    }
    for j in 0..m {
        // base direction e_j on N: action sigma -> omega^N_j sigma
        for a in 0..m {
            for b in 0..n {
                let row = a * n + b;
                for c in 0..m {
                    let col = c * n + b;
                    let entry = conn_n.omega()[j][a][c].rename_vars(&rename);
                    if !entry.is_zero() {
                        omega[n + j][row][col] = entry;
                    }
                }
            }
        }
    }
    let domain = conn_m.domain().product(conn_n.domain());
    BundleConnection::new(n + m, rank, omega, domain, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;
    use crate::fixtures;
    use rand::{Rng, SeedableRng};

    fn unit_box(n: usize) -> BoxDomain {
        BoxDomain::new(vec![(-1.0, 1.0); n]).unwrap()
    }

    fn random_tangent_connection(rng: &mut impl Rng, n: usize) -> BundleConnection {
        let coords = chart_coords(n);
        let mut gamma = vec![vec![vec![ScalarExpr::zero(); n]; n]; n];
        for plane in gamma.iter_mut() {
            for row in plane.iter_mut() {
                for entry in row.iter_mut() {
                    let mut terms = vec![ScalarExpr::constant(rng.random_range(-0.4..0.4))];
                    for v in &coords {
                        terms.push(ScalarExpr::mul(
                            &ScalarExpr::constant(rng.random_range(-0.4..0.4)),
                            &ScalarExpr::variable(v),
                        ));
                    }
                    *entry = ScalarExpr::sum(&terms);
                }
            }
        }
        BundleConnection::from_christoffel(n, gamma, unit_box(n)).unwrap()
    }

    fn random_symmetric_connection(rng: &mut impl Rng, n: usize) -> BundleConnection {
        let coords = chart_coords(n);
        let mut gamma = vec![vec![vec![ScalarExpr::zero(); n]; n]; n];
        for a in 0..n {
            for i in 0..n {
                for j in i..n {
                    let mut terms = vec![ScalarExpr::constant(rng.random_range(-0.4..0.4))];
                    for v in &coords {
                        terms.push(ScalarExpr::mul(
                            &ScalarExpr::constant(rng.random_range(-0.4..0.4)),
                            &ScalarExpr::variable(v),
                        ));
                    }
                    let e = ScalarExpr::sum(&terms);
                    gamma[a][i][j] = e.clone();
                    gamma[a][j][i] = e;
                }
            }
        }
        BundleConnection::from_christoffel(n, gamma, unit_box(n)).unwrap()
    }

    #[test]
    fn covariant_derivative_examples() {
        // flat, constant section
        let conn = BundleConnection::flat(2, 2, unit_box(2), false).unwrap();
        let section = vec![ScalarExpr::constant(2.0), ScalarExpr::constant(-1.0)];
        let d = conn.covariant_derivative(&section, 0).unwrap();
        assert!(d.iter().all(|e| e.is_zero()));

        // r = 1, omega_1 = a: s = exp(-a x1) is parallel
        let a = 0.7;
        let omega = vec![
            vec![vec![ScalarExpr::constant(a)]],
            vec![vec![ScalarExpr::zero()]],
        ];
        let conn = BundleConnection::new(2, 1, omega, unit_box(2), false).unwrap();
        let s = parse_expr("exp(-0.7*x1)", &["x1", "x2"]).unwrap();
        let d = conn.covariant_derivative(&[s], 0).unwrap();
        for x in [[-0.5, 0.0], [0.2, 0.3], [0.9, -0.9]] {
            let v = d[0].eval(&[("x1", x[0]), ("x2", x[1])]).unwrap();
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn covariant_derivative_satisfies_leibniz() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let conn = random_tangent_connection(&mut rng, 2);
        let coords = chart_coords(2);
        let f = parse_expr("sin(x1)*x2", &coords).unwrap();
        let s = vec![
            parse_expr("x1^2 - x2", &coords).unwrap(),
            parse_expr("exp(x1*x2)", &coords).unwrap(),
        ];
        let fs: Vec<ScalarExpr> = s.iter().map(|e| ScalarExpr::mul(&f, e)).collect();
        for i in 0..2 {
            let lhs = conn.covariant_derivative(&fs, i).unwrap();
            let ds = conn.covariant_derivative(&s, i).unwrap();
            let df = f.differentiate(&coords[i]);
            for _ in 0..10 {
                let x: Vec<f64> = (0..2).map(|_| rng.random_range(-0.9..0.9)).collect();
                let env = [("x1", x[0]), ("x2", x[1])];
                for a in 0..2 {
                    let left = lhs[a].eval(&env).unwrap();
                    let right = df.eval(&env).unwrap() * s[a].eval(&env).unwrap()
                        + f.eval(&env).unwrap() * ds[a].eval(&env).unwrap();
                    assert!((left - right).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn curvature_flat_and_constant_commuting() {
        let conn = BundleConnection::flat(2, 2, unit_box(2), false).unwrap();
        let r = conn.curvature();
        assert!(r.components().iter().all(|c| c.is_zero()));

        // constant multiples of the identity commute
        let omega = vec![
            vec![
                vec![ScalarExpr::constant(0.3), ScalarExpr::zero()],
                vec![ScalarExpr::zero(), ScalarExpr::constant(0.3)],
            ],
            vec![
                vec![ScalarExpr::constant(-0.8), ScalarExpr::zero()],
                vec![ScalarExpr::zero(), ScalarExpr::constant(-0.8)],
            ],
        ];
        let conn = BundleConnection::new(2, 2, omega, unit_box(2), false).unwrap();
        let r = conn.curvature().eval_at(&[0.3, -0.4]).unwrap();
        assert!(r.max_abs() < 1e-15);
    }

    #[test]
    fn sphere_curvature_has_unit_sectional_curvature() {
        let conn = fixtures::sphere_connection();
        let r = conn.curvature();
        for theta in [0.7, 1.2, 2.0] {
            let val = r.eval_at(&[theta, 0.4]).unwrap();
            let op = val.operator(&[0, 1]);
            // R_{theta phi} = [[0, sin^2 theta], [-1, 0]]
            let s2 = theta.sin() * theta.sin();
            assert!((op[(0, 1)] - s2).abs() < 1e-12);
            assert!((op[(1, 0)] + 1.0).abs() < 1e-12);
            // index lowering with g = diag(1, sin^2): sectional curvature 1
            let k = op[(0, 1)] / s2;
            assert!((k - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn curvature_is_antisymmetric_in_base_slots() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let conn = random_tangent_connection(&mut rng, 3);
        let r = conn.curvature();
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-0.9..0.9)).collect();
            let val = r.eval_at(&x).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let a = val.operator(&[i, j]);
                    let b = val.operator(&[j, i]);
                    assert!(crate::geometry::mat_inf_norm(&(a + b)) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn first_bianchi_for_symmetric_connections() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(37);
        let conn = random_symmetric_connection(&mut rng, 3);
        let r = conn.curvature();
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-0.9..0.9)).collect();
            let val = r.eval_at(&x).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        let mut acc = vec![0.0; 3];
                        for a in 0..3 {
                            acc[a] += val.operator(&[i, j])[(a, k)];
                            acc[a] += val.operator(&[j, k])[(a, i)];
                            acc[a] += val.operator(&[k, i])[(a, j)];
                        }
                        assert!(crate::geometry::inf_norm(&acc) < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn torsion_examples_and_definitional_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let sym = random_symmetric_connection(&mut rng, 2);
        let t = sym.torsion().unwrap();
        let val = t.eval_at(&[0.3, 0.2]).unwrap();
        assert!(val.max_abs() < 1e-15);

        // Gamma^1_{12} = 1, rest 0 -> T^1_{12} = 1
        let mut gamma = vec![vec![vec![ScalarExpr::zero(); 2]; 2]; 2];
        gamma[0][0][1] = ScalarExpr::one();
        let conn = BundleConnection::from_christoffel(2, gamma, unit_box(2)).unwrap();
        let t = conn.torsion().unwrap().eval_at(&[0.0, 0.0]).unwrap();
        assert_eq!(t.get(&[0, 1], &[0]), 1.0);
        assert_eq!(t.get(&[1, 0], &[0]), -1.0);

        // definitional oracle on constant fields:
        // T(X, Y) = nabla_X Y - nabla_Y X for constant X, Y
        let conn = random_tangent_connection(&mut rng, 2);
        let t = conn.torsion().unwrap();
        for _ in 0..10 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-0.9..0.9)).collect();
            let xv: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let yv: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let om = conn.omega_at(&x).unwrap();
            let tv = t.eval_at(&x).unwrap();
            for a in 0..2 {
                let mut expect = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        expect += xv[i] * yv[j] * (om[i][(a, j)] - om[j][(a, i)]);
                    }
                }
                let mut direct = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        direct += tv.get(&[i, j], &[a]) * xv[i] * yv[j];
                    }
                }
                assert!((expect - direct).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn parallel_transport_flat_and_linear() {
        let conn = BundleConnection::flat(2, 2, unit_box(2), false).unwrap();
        let curve = |t: f64| Ok((vec![0.5 * t, 0.2 * t], vec![0.5, 0.2]));
        let sol = conn
            .parallel_transport(curve, &[1.0, -2.0], (0.0, 1.0), 1e-2)
            .unwrap();
        assert_eq!(sol.end_state(), &[1.0, -2.0]);

        // linearity of transport
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(43);
        let conn = random_tangent_connection(&mut rng, 2);
        let curve = |t: f64| {
            Ok((vec![0.4 * t, 0.3 * (t * std::f64::consts::PI).sin()], {
                vec![
                    0.4,
                    0.3 * std::f64::consts::PI * (t * std::f64::consts::PI).cos(),
                ]
            }))
        };
        let s0 = [0.3, 0.7];
        let s1 = [-0.5, 0.2];
        let combo: Vec<f64> = s0.iter().zip(&s1).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        let t0 = conn
            .parallel_transport(curve, &s0, (0.0, 1.0), 1e-3)
            .unwrap();
        let t1 = conn
            .parallel_transport(curve, &s1, (0.0, 1.0), 1e-3)
            .unwrap();
        let tc = conn
            .parallel_transport(curve, &combo, (0.0, 1.0), 1e-3)
            .unwrap();
        for c in 0..2 {
            let expect = 2.0 * t0.end_state()[c] - 3.0 * t1.end_state()[c];
            assert!((tc.end_state()[c] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn sphere_transport_preserves_the_round_metric() {
        let conn = fixtures::sphere_connection();
        let theta0 = 1.1;
        let curve = |t: f64| {
            Ok((vec![theta0 + 0.2 * (3.0 * t).sin(), t], {
                vec![0.6 * (3.0 * t).cos(), 1.0]
            }))
        };
        let s0 = [0.4, -0.3];
        let sol = conn
            .parallel_transport(curve, &s0, (0.0, 1.5), 1e-3)
            .unwrap();
        let g = |theta: f64, v: &[f64]| v[0] * v[0] + theta.sin().powi(2) * v[1] * v[1];
        let start_norm = g(theta0, &s0);
        for (i, t) in sol.breakpoints().iter().enumerate().step_by(300) {
            let theta = theta0 + 0.2 * (3.0 * t).sin();
            let norm = g(theta, &sol.states()[i]);
            assert!((norm - start_norm).abs() < 1e-8);
        }
    }

    #[test]
    fn nabla_tensor_of_flat_constant_vanishes_and_fd_oracle_agrees() {
        // flat connection, constant tensor
        let flat = BundleConnection::flat(2, 2, unit_box(2), true).unwrap();
        let mut tensor = TensorFieldExpr::zeros(2, 1, FiberShape::Vector(2));
        tensor.set(&[0], &[0], ScalarExpr::constant(1.5));
        tensor.set(&[1], &[1], ScalarExpr::constant(-2.0));
        let d = covariant_derivative_tensor(&flat, &flat, &tensor, 1, 1_000_000).unwrap();
        assert!(d.components().iter().all(|c| c.is_zero()));

        // transport-conjugation finite-difference oracle for nabla R
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(53);
        let conn = random_symmetric_connection(&mut rng, 2);
        let r = conn.curvature();
        let dr = covariant_derivative_tensor(&conn, &conn, &r, 1, 1_000_000).unwrap();
        let x0 = vec![0.15, -0.1];
        let h = 1e-4;
        for dir in 0..2 {
            let pull = |t_end: f64| -> DMatrix<f64> {
                // walk the coordinate line in either direction
                let sgn = t_end.signum();
                let mag = t_end.abs();
                let curve = |t: f64| {
                    let mut x = x0.clone();
                    x[dir] += sgn * t;
                    let mut v = vec![0.0; 2];
                    v[dir] = sgn;
                    Ok((x, v))
                };
                let p = conn
                    .transport_matrix(curve, (0.0, mag), f64::max(1e-6, mag / 64.0))
                    .unwrap();
                let mut x = x0.clone();
                x[dir] += t_end;
                let val = r.eval_at(&x).unwrap();
                // frame-parallel pullback: P^{-1} R(P e1, P e2) P
                let pinv = p.clone().try_inverse().unwrap();
                let mut op = DMatrix::zeros(2, 2);
                for i in 0..2 {
                    for j in 0..2 {
                        op += val.operator(&[i, j]) * (p[(i, 0)] * p[(j, 1)]);
                    }
                }
                &pinv * op * &p
            };
            let fd = (pull(h) - pull(-h)) / (2.0 * h);
            let sym = dr.eval_at(&x0).unwrap();
            let mut expect = DMatrix::zeros(2, 2);
            expect.copy_from(&sym.operator(&[dir, 0, 1]));
            assert!(
                crate::geometry::mat_inf_norm(&(fd - expect.clone())) < 1e-6,
                "dir {dir}"
            );
        }
    }

    #[test]
    fn sphere_is_locally_symmetric() {
        let conn = fixtures::sphere_connection();
        let r = conn.curvature();
        let dr = covariant_derivative_tensor(&conn, &conn, &r, 1, 1_000_000).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(59);
        for _ in 0..10 {
            let x = vec![rng.random_range(0.5..2.5), rng.random_range(-3.0..3.0)];
            let val = dr.eval_at(&x).unwrap();
            assert!(val.max_abs() < 1e-9, "nabla R = {}", val.max_abs());
        }
    }

    #[test]
    fn dual_connection_pairing_and_curvature() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(61);
        let conn = random_tangent_connection(&mut rng, 2);
        let dual = conn.dual_connection();
        let coords = chart_coords(2);
        let alpha = vec![
            parse_expr("x1*x2", &coords).unwrap(),
            parse_expr("cos(x2)", &coords).unwrap(),
        ];
        let s = vec![
            parse_expr("x2^2", &coords).unwrap(),
            parse_expr("exp(x1)", &coords).unwrap(),
        ];
        // d_i <alpha, s> = <nabla*_i alpha, s> + <alpha, nabla_i s>
        for i in 0..2 {
            let pairing = ScalarExpr::sum(&[
                ScalarExpr::mul(&alpha[0], &s[0]),
                ScalarExpr::mul(&alpha[1], &s[1]),
            ]);
            let lhs = pairing.differentiate(&coords[i]);
            let da = dual.covariant_derivative(&alpha, i).unwrap();
            let ds = conn.covariant_derivative(&s, i).unwrap();
            for _ in 0..10 {
                let x: Vec<f64> = (0..2).map(|_| rng.random_range(-0.9..0.9)).collect();
                let env = [("x1", x[0]), ("x2", x[1])];
                let left = lhs.eval(&env).unwrap();
                let right = da[0].eval(&env).unwrap() * s[0].eval(&env).unwrap()
                    + da[1].eval(&env).unwrap() * s[1].eval(&env).unwrap()
                    + alpha[0].eval(&env).unwrap() * ds[0].eval(&env).unwrap()
                    + alpha[1].eval(&env).unwrap() * ds[1].eval(&env).unwrap();
                assert!((left - right).abs() < 1e-12);
            }
        }
        // R*(X, Y) = -R(X, Y)^T
        let r = conn.curvature();
        let rd = dual.curvature();
        for _ in 0..10 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-0.9..0.9)).collect();
            let rv = r.eval_at(&x).unwrap();
            let rdv = rd.eval_at(&x).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let a = rv.operator(&[i, j]);
                    let b = rdv.operator(&[i, j]);
                    assert!(crate::geometry::mat_inf_norm(&(b + a.transpose())) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bilinear_connection_curvature_identity_and_transport_rule() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(67);
        let conn = random_tangent_connection(&mut rng, 2);
        let bil = conn.bilinear_connection();
        let r = conn.curvature();
        let rb = bil.curvature();
        // (R^bil(e_i, e_j) G) = -(R_{ij}^T G + G R_{ij})
        for _ in 0..20 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-0.9..0.9)).collect();
            let g = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let rv = r.eval_at(&x).unwrap();
            let rbv = rb.eval_at(&x).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let rij = rv.operator(&[i, j]);
                    let expect = -(rij.transpose() * &g + &g * &rij);
                    let op = rbv.operator(&[i, j]); // 4x4 on vec(G)
                    let gvec = nalgebra::DVector::from_fn(4, |k, _| g[(k / 2, k % 2)]);
                    let got = &op * gvec;
                    for a in 0..2 {
                        for b in 0..2 {
                            assert!((got[a * 2 + b] - expect[(a, b)]).abs() < 1e-10);
                        }
                    }
                }
            }
        }
        // transport rule: bilinear transport of g0 equals (P^-1)^T g0 P^-1
        let curve = |t: f64| Ok((vec![0.3 * t, 0.2 * t * t], vec![0.3, 0.4 * t]));
        let g0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0]);
        let g0_vec: Vec<f64> = (0..4).map(|k| g0[(k / 2, k % 2)]).collect();
        let transported = bil
            .parallel_transport(curve, &g0_vec, (0.0, 1.0), 1e-3)
            .unwrap();
        let p = conn.transport_matrix(curve, (0.0, 1.0), 1e-3).unwrap();
        let pinv = p.try_inverse().unwrap();
        let expect = pinv.transpose() * &g0 * &pinv;
        for a in 0..2 {
            for b in 0..2 {
                assert!((transported.end_state()[a * 2 + b] - expect[(a, b)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn hom_connection_curvature_and_parallel_sigma() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(71);
        let conn_m = random_tangent_connection(&mut rng, 2);
        let conn_n = random_tangent_connection(&mut rng, 2);
        let hom = hom_connection(&conn_m, &conn_n).unwrap();
        let rm = conn_m.curvature();
        let rn = conn_n.curvature();
        let re = hom.curvature();
        // R^E((v1,w1),(v2,w2)) sigma = R^N(w1,w2) sigma - sigma R^M(v1,v2)
        for _ in 0..10 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-0.9..0.9)).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.random_range(-0.9..0.9)).collect();
            let mut xy = x.clone();
            xy.extend_from_slice(&y);
            let v1: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v2: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w1: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w2: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let sigma = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));

            let rmv = rm.eval_at(&x).unwrap();
            let rnv = rn.eval_at(&y).unwrap();
            let rev = re.eval_at(&xy).unwrap();

            let mut rm_op = DMatrix::zeros(2, 2);
            let mut rn_op = DMatrix::zeros(2, 2);
            for i in 0..2 {
                for j in 0..2 {
                    rm_op += rmv.operator(&[i, j]) * (v1[i] * v2[j]);
                    rn_op += rnv.operator(&[i, j]) * (w1[i] * w2[j]);
                }
            }
            let expect = &rn_op * &sigma - &sigma * &rm_op;

            let mut re_op = DMatrix::zeros(4, 4);
            let u1 = [v1[0], v1[1], w1[0], w1[1]];
            let u2 = [v2[0], v2[1], w2[0], w2[1]];
            for i in 0..4 {
                for j in 0..4 {
                    re_op += rev.operator(&[i, j]) * (u1[i] * u2[j]);
                }
            }
            let sigma_vec = nalgebra::DVector::from_fn(4, |k, _| sigma[(k / 2, k % 2)]);
            let got = re_op * sigma_vec;
            for a in 0..2 {
                for b in 0..2 {
                    assert!((got[a * 2 + b] - expect[(a, b)]).abs() < 1e-10);
                }
            }
        }

        // sigma(t) = P^N sigma0 (P^M)^-1 is hom-parallel along (gamma, mu)
        let gamma = |t: f64| Ok((vec![0.4 * t, 0.1 * t], vec![0.4, 0.1]));
        let mu = |t: f64| Ok((vec![-0.2 * t, 0.3 * t], vec![-0.2, 0.3]));
        let product_curve = |t: f64| {
            let (xg, vg) = gamma(t)?;
            let (xm, vm) = mu(t)?;
            let mut x = xg;
            x.extend(xm);
            let mut v = vg;
            v.extend(vm);
            Ok((x, v))
        };
        let sigma0 = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 2.0, 0.3]);
        let sigma0_vec: Vec<f64> = (0..4).map(|k| sigma0[(k / 2, k % 2)]).collect();
        let hom_transport = hom
            .parallel_transport(product_curve, &sigma0_vec, (0.0, 1.0), 1e-3)
            .unwrap();
        let pm = conn_m.transport_matrix(gamma, (0.0, 1.0), 1e-3).unwrap();
        let pn = conn_n.transport_matrix(mu, (0.0, 1.0), 1e-3).unwrap();
        let expect = &pn * &sigma0 * pm.try_inverse().unwrap();
        for a in 0..2 {
            for b in 0..2 {
                assert!(
                    (hom_transport.end_state()[a * 2 + b] - expect[(a, b)]).abs() < 1e-8,
                    "composed transports should be hom-parallel"
                );
            }
        }
    }

    #[test]
    fn pullback_connection_identity_naturality_chain_rule() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(73);
        let conn = random_tangent_connection(&mut rng, 2);
        let coords = chart_coords(2);

        // identity pull-back
        let ident = MapExpr::new(
            2,
            2,
            vec![ScalarExpr::variable("x1"), ScalarExpr::variable("x2")],
            unit_box(2),
        )
        .unwrap();
        let pulled = pullback_connection(&conn, &ident).unwrap();
        for _ in 0..5 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-0.9..0.9)).collect();
            let a = conn.omega_at(&x).unwrap();
            let b = pulled.omega_at(&x).unwrap();
            for i in 0..2 {
                assert!(crate::geometry::mat_inf_norm(&(a[i].clone() - b[i].clone())) < 1e-12);
            }
        }

        // curvature naturality: R^{f*}(v, w) = R(df v, df w) o f
        let f = MapExpr::new(
            2,
            2,
            vec![
                parse_expr("x1 + 0.3*x2^2", &coords).unwrap(),
                parse_expr("x2 - 0.2*x1*x2", &coords).unwrap(),
            ],
            BoxDomain::new(vec![(-0.6, 0.6), (-0.6, 0.6)]).unwrap(),
        )
        .unwrap();
        let pulled = pullback_connection(&conn, &f).unwrap();
        let r = conn.curvature();
        let rp = pulled.curvature();
        for _ in 0..10 {
            let z: Vec<f64> = (0..2).map(|_| rng.random_range(-0.5..0.5)).collect();
            let env = [("x1", z[0]), ("x2", z[1])];
            let fx: Vec<f64> = f.components.iter().map(|c| c.eval(&env).unwrap()).collect();
            // df at z
            let mut df = DMatrix::zeros(2, 2);
            for i in 0..2 {
                for j in 0..2 {
                    df[(i, j)] = f.components[i]
                        .differentiate(&coords[j])
                        .eval(&env)
                        .unwrap();
                }
            }
            let rv = r.eval_at(&fx).unwrap();
            let rpv = rp.eval_at(&z).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let mut expect = DMatrix::zeros(2, 2);
                    for p in 0..2 {
                        for q in 0..2 {
                            expect += rv.operator(&[p, q]) * (df[(p, i)] * df[(q, j)]);
                        }
                    }
                    let got = rpv.operator(&[i, j]);
                    assert!(crate::geometry::mat_inf_norm(&(got - expect)) < 1e-9);
                }
            }
        }

        // chain rule (f o g)* nabla = g* (f* nabla)
        let g = MapExpr::new(
            2,
            2,
            vec![
                parse_expr("0.5*x1 - 0.1*x2", &coords).unwrap(),
                parse_expr("0.4*x2 + 0.2*x1^2", &coords).unwrap(),
            ],
            BoxDomain::new(vec![(-0.5, 0.5), (-0.5, 0.5)]).unwrap(),
        )
        .unwrap();
        let subst: std::collections::HashMap<String, ScalarExpr> = coords
            .iter()
            .cloned()
            .zip(g.components.iter().cloned())
            .collect();
        let fog = MapExpr::new(
            2,
            2,
            f.components.iter().map(|c| c.substitute(&subst)).collect(),
            g.domain.clone(),
        )
        .unwrap();
        let lhs = pullback_connection(&conn, &fog).unwrap();
        let rhs = pullback_connection(&pullback_connection(&conn, &f).unwrap(), &g).unwrap();
        for _ in 0..10 {
            let z: Vec<f64> = (0..2).map(|_| rng.random_range(-0.4..0.4)).collect();
            let a = lhs.omega_at(&z).unwrap();
            let b = rhs.omega_at(&z).unwrap();
            for i in 0..2 {
                assert!(crate::geometry::mat_inf_norm(&(a[i].clone() - b[i].clone())) < 1e-10);
            }
        }
    }

    #[test]
    fn horizontal_distribution_levi_equals_minus_curvature() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(79);
        let conn = random_tangent_connection(&mut rng, 2);
        let dist = conn.horizontal_distribution(unit_box(2)).unwrap();
        let r = conn.curvature();
        for _ in 0..20 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-0.9..0.9)).collect();
            let xi: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut p = x.clone();
            p.extend_from_slice(&xi);
            let levi = dist.levi_form(&p, &v, &w).unwrap();
            let rv = r.eval_at(&x).unwrap();
            let mut r_op = DMatrix::zeros(2, 2);
            for i in 0..2 {
                for j in 0..2 {
                    r_op += rv.operator(&[i, j]) * (v[i] * w[j]);
                }
            }
            let xi_vec = nalgebra::DVector::from_column_slice(&xi);
            let expect = -(r_op * xi_vec);
            for a in 0..2 {
                assert!(
                    (levi[a] - expect[a]).abs() < 1e-9,
                    "levi {levi:?} expect {expect:?}"
                );
            }
        }
    }
}
