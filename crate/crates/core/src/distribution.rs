//! Graph distributions `D = Gr(F)` on a chart in `R^n = R^k x R^m`: the Levi
//! form (the pointwise obstruction to integrability), horizontal lifting
//! along rays, the single-leaf solver for the total differential equation
//! `df(x) = F(x, f(x))`, and the higher-order iterated-bracket test.
//!
//! Sign convention: expanding the bracket of the lifted frame fields
//! `X~ = (X, F(X))` gives
//!
//! ```text
//! L(X, Y) = dxF(X)(Y) + dyF(F(X))(Y) - dxF(Y)(X) - dyF(F(Y))(X)
//! ```
//!
//! with a minus sign on the last term; the test suite pins this against the
//! flow-commutator oracle.

use crate::error::{Error, Result};
use crate::expr::{BoundExpr, ScalarExpr};
use crate::geometry::{
    grid_partial, inf_norm, integrate_ode, BoxDomain, CurveSolution, GridSpec, StencilKind,
    VectorFieldExpr,
};
use crate::parallel::par_map;

/// Defects below this threshold are treated as zero (float noise only).
pub const DEFECT_TOL: f64 = 1e-9;

/// Default node budget for iterated symbolic brackets.
pub const DEFAULT_EXPR_BUDGET: usize = 500_000;

/// Coordinate names `x1..xk, y1..ym` used by all graph-distribution fields.
pub fn graph_coords(k: usize, m: usize) -> Vec<String> {
    let mut coords: Vec<String> = (1..=k).map(|i| format!("x{i}")).collect();
    coords.extend((1..=m).map(|a| format!("y{a}")));
    coords
}

/// A distribution `D_(x,y) = Gr(F_(x,y))` of rank `k` on an open box in
/// `R^k x R^m`, with `F` an `m x k` matrix of expressions over
/// `x1..xk, y1..ym`.
#[derive(Debug, Clone)]
pub struct GraphDistribution {
    k: usize,
    m: usize,
    f: Vec<Vec<ScalarExpr>>,
    domain: BoxDomain,
    coords: Vec<String>,
    bound_f: Vec<Vec<BoundExpr>>,
    /// `bound_dfx[a][i][j] = d F_{a i} / d x_j`
    bound_dfx: Vec<Vec<Vec<BoundExpr>>>,
    /// `bound_dfy[a][i][b] = d F_{a i} / d y_b`
    bound_dfy: Vec<Vec<Vec<BoundExpr>>>,
}

impl GraphDistribution {
    pub fn new(k: usize, m: usize, f: Vec<Vec<ScalarExpr>>, domain: BoxDomain) -> Result<Self> {
        if k == 0 || m == 0 {
            return Err(Error::Dimension("need k >= 1 and m >= 1".into()));
        }
        if domain.dim() != k + m {
            return Err(Error::Dimension(format!(
                "domain dimension {} != k + m = {}",
                domain.dim(),
                k + m
            )));
        }
        if f.len() != m || f.iter().any(|row| row.len() != k) {
            return Err(Error::Dimension(format!(
                "F must be an {m} x {k} matrix of expressions"
            )));
        }
        let coords = graph_coords(k, m);
        for (a, row) in f.iter().enumerate() {
            for (i, entry) in row.iter().enumerate() {
                for var in entry.free_vars() {
                    if !coords.contains(&var) {
                        return Err(Error::Dimension(format!(
                            "F[{a}][{i}] uses `{var}` outside x1..x{k}, y1..y{m}"
                        )));
                    }
                }
            }
        }
        let bind = |e: &ScalarExpr| e.bind(&coords);
        let mut bound_f = Vec::with_capacity(m);
        let mut bound_dfx = Vec::with_capacity(m);
        let mut bound_dfy = Vec::with_capacity(m);
        for row in &f {
            let mut bf = Vec::with_capacity(k);
            let mut bdx = Vec::with_capacity(k);
            let mut bdy = Vec::with_capacity(k);
            for entry in row {
                bf.push(bind(entry)?);
                bdx.push(
                    (0..k)
                        .map(|j| bind(&entry.differentiate(&coords[j])))
                        .collect::<Result<Vec<_>>>()?,
                );
                bdy.push(
                    (0..m)
                        .map(|b| bind(&entry.differentiate(&coords[k + b])))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            bound_f.push(bf);
            bound_dfx.push(bdx);
            bound_dfy.push(bdy);
        }
        Ok(GraphDistribution {
            k,
            m,
            f,
            domain,
            coords,
            bound_f,
            bound_dfx,
            bound_dfy,
        })
    }

    /// Convenience constructor from expression strings.
    pub fn from_strs(k: usize, m: usize, f: &[Vec<&str>], domain: BoxDomain) -> Result<Self> {
        let coords = graph_coords(k, m);
        let exprs = f
            .iter()
            .map(|row| {
                row.iter()
                    .map(|s| crate::expr::parse_expr(s, &coords))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        GraphDistribution::new(k, m, exprs, domain)
    }

    pub fn base_dim(&self) -> usize {
        self.k
    }

    pub fn fiber_dim(&self) -> usize {
        self.m
    }

    pub fn total_dim(&self) -> usize {
        self.k + self.m
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn coords(&self) -> &[String] {
        &self.coords
    }

    pub fn exprs(&self) -> &[Vec<ScalarExpr>] {
        &self.f
    }

    /// The base-coordinate sub-box of the domain.
    pub fn base_box(&self) -> BoxDomain {
        BoxDomain::new(self.domain.intervals()[..self.k].to_vec()).expect("valid sub-box")
    }

    /// `F_p` as an `m x k` value matrix.
    pub fn f_at(&self, p: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut scratch = Vec::new();
        self.bound_f
            .iter()
            .map(|row| {
                row.iter()
                    .map(|b| b.eval_with(p, &mut scratch))
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    }

    /// `F_p(v)` for a base vector `v`.
    pub fn apply_f(&self, p: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let fm = self.f_at(p)?;
        Ok(fm
            .iter()
            .map(|row| row.iter().zip(v).map(|(c, x)| c * x).sum())
            .collect())
    }

    /// Vertical defect `w - F_p(v)` of a tangent vector `(v, w)` at `p`:
    /// the quotient-space component under `(v, w) + D |-> w - F(v)`.
    pub fn vertical_defect(&self, p: &[f64], tangent: &[f64]) -> Result<Vec<f64>> {
        if tangent.len() != self.total_dim() {
            return Err(Error::Dimension(
                "tangent vector has wrong dimension".into(),
            ));
        }
        let fv = self.apply_f(p, &tangent[..self.k])?;
        Ok(tangent[self.k..]
            .iter()
            .zip(&fv)
            .map(|(w, f)| w - f)
            .collect())
    }

    /// The lifted horizontal frame field `X~ = (X, F(X))` for a constant
    /// base vector `X`, as a vector field on the total space.
    pub fn lifted_field(&self, x_vec: &[f64]) -> Result<VectorFieldExpr> {
        if x_vec.len() != self.k {
            return Err(Error::Dimension("lifted field needs a base vector".into()));
        }
        let mut comps: Vec<ScalarExpr> = x_vec.iter().map(|c| ScalarExpr::constant(*c)).collect();
        for a in 0..self.m {
            let terms: Vec<ScalarExpr> = (0..self.k)
                .map(|i| ScalarExpr::mul(&ScalarExpr::constant(x_vec[i]), &self.f[a][i]))
                .collect();
            comps.push(ScalarExpr::sum(&terms));
        }
        VectorFieldExpr::new(self.coords.clone(), comps)
    }

    /// Levi form `L_p(X, Y)` under the identification `(v,w)+D |-> w - F(v)`.
    pub fn levi_form(&self, p: &[f64], x_vec: &[f64], y_vec: &[f64]) -> Result<Vec<f64>> {
        self.domain.check(p)?;
        if x_vec.len() != self.k || y_vec.len() != self.k {
            return Err(Error::Dimension(
                "Levi form arguments are base vectors".into(),
            ));
        }
        let mut scratch = Vec::new();
        let fx = self.apply_f(p, x_vec)?;
        let fy = self.apply_f(p, y_vec)?;
        let mut out = vec![0.0; self.m];
        for a in 0..self.m {
            let mut acc = 0.0;
            for j in 0..self.k {
                // d_x F in direction X applied to Y, minus the swap.
                let mut dx_x = 0.0;
                let mut dx_y = 0.0;
                for i in 0..self.k {
                    let d = self.bound_dfx[a][j][i].eval_with(p, &mut scratch)?;
                    dx_x += x_vec[i] * d;
                    dx_y += y_vec[i] * d;
                }
                // d_y F in direction F(X) applied to Y, minus the swap.
                let mut dy_fx = 0.0;
                let mut dy_fy = 0.0;
                for b in 0..self.m {
                    let d = self.bound_dfy[a][j][b].eval_with(p, &mut scratch)?;
                    dy_fx += fx[b] * d;
                    dy_fy += fy[b] * d;
                }
                acc += (dx_x + dy_fx) * y_vec[j] - (dx_y + dy_fy) * x_vec[j];
            }
            out[a] = acc;
        }
        Ok(out)
    }

    /// Max Levi-form magnitude over the coordinate frame pairs at `p`.
    pub fn levi_residual_at(&self, p: &[f64]) -> Result<f64> {
        let mut worst = 0.0f64;
        for i in 0..self.k {
            for j in (i + 1)..self.k {
                let mut e_i = vec![0.0; self.k];
                let mut e_j = vec![0.0; self.k];
                e_i[i] = 1.0;
                e_j[j] = 1.0;
                worst = worst.max(inf_norm(&self.levi_form(p, &e_i, &e_j)?));
            }
        }
        Ok(worst)
    }

    /// Horizontal lift of the ray `t |-> x0 + t lambda` through `(x0, y0)`:
    /// the dense solution of `dPsi/dt = F_(x0 + t lambda, Psi)(lambda)`.
    pub fn horizontal_lift_ray(
        &self,
        x0: &[f64],
        y0: &[f64],
        lambda: &[f64],
        t_end: f64,
        step: f64,
    ) -> Result<CurveSolution> {
        if x0.len() != self.k || y0.len() != self.m || lambda.len() != self.k {
            return Err(Error::Dimension(
                "lift arguments have wrong dimensions".into(),
            ));
        }
        let mut p0 = x0.to_vec();
        p0.extend_from_slice(y0);
        self.domain.check(&p0)?;
        let base_box = self.base_box();
        let x_end: Vec<f64> = x0.iter().zip(lambda).map(|(x, l)| x + t_end * l).collect();
        base_box.check(&x_end)?;

        let mut point = vec![0.0; self.total_dim()];
        let mut scratch = Vec::new();
        integrate_ode(
            |t: f64, psi: &[f64], dpsi: &mut [f64]| {
                for i in 0..self.k {
                    point[i] = x0[i] + t * lambda[i];
                }
                point[self.k..].copy_from_slice(psi);
                self.domain.check(&point)?;
                for a in 0..self.m {
                    let mut acc = 0.0;
                    for i in 0..self.k {
                        acc += self.bound_f[a][i].eval_with(&point, &mut scratch)? * lambda[i];
                    }
                    dpsi[a] = acc;
                }
                Ok(())
            },
            y0,
            (0.0, t_end),
            step,
        )
    }
}

/// A solved leaf candidate: grid values of `f` with per-point residuals.
#[derive(Debug, Clone)]
pub struct LeafGrid {
    pub grid: GridSpec,
    pub base_point: Vec<f64>,
    /// `values[flat]` is `f(x) in R^m` at the grid node.
    pub values: Vec<Vec<f64>>,
    /// Max Levi magnitude sampled along each lifting ray (breakpoints).
    pub levi_residual: Vec<f64>,
    /// `|grid-Jacobian(f) - F_(x, f(x))|_inf` per node.
    pub leaf_residual: Vec<f64>,
    /// Node used a one-sided or reduced-order stencil.
    pub boundary_flag: Vec<bool>,
}

impl LeafGrid {
    /// Wrap externally supplied leaf values (residuals left empty).
    pub fn from_values(grid: GridSpec, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension("value count != grid size".into()));
        }
        let n = grid.len();
        let base_point = grid.center().to_vec();
        Ok(LeafGrid {
            grid,
            base_point,
            values,
            levi_residual: vec![0.0; n],
            leaf_residual: vec![0.0; n],
            boundary_flag: vec![false; n],
        })
    }

    pub fn max_leaf_residual(&self) -> f64 {
        inf_norm(&self.leaf_residual)
    }

    /// Max leaf residual over nodes with full-order stencils.
    pub fn max_interior_leaf_residual(&self) -> f64 {
        self.leaf_residual
            .iter()
            .zip(&self.boundary_flag)
            .filter(|(_, flagged)| !**flagged)
            .map(|(r, _)| *r)
            .fold(0.0f64, f64::max)
    }

    pub fn max_levi_residual(&self) -> f64 {
        inf_norm(&self.levi_residual)
    }
}

/// Report of a leaf check.
#[derive(Debug, Clone)]
pub struct LeafReport {
    pub max_leaf_residual: f64,
    pub max_levi_residual: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Fill the leaf-residual and boundary-flag fields of a `LeafGrid` from its
/// stored values: grid finite differences of `f` against `F_(x, f(x))`.
fn fill_leaf_residuals(dist: &GraphDistribution, leaf: &mut LeafGrid) -> Result<()> {
    let grid = leaf.grid.clone();
    let m = dist.fiber_dim();
    let k = dist.base_dim();
    for flat in 0..grid.len() {
        let x = grid.point(flat);
        let mut p = x.clone();
        p.extend_from_slice(&leaf.values[flat]);
        let f_val = dist.f_at(&p)?;
        let mut worst = 0.0f64;
        let mut flagged = false;
        for i in 0..k {
            for a in 0..m {
                let get = |delta: isize| grid.neighbor(flat, i, delta).map(|nb| leaf.values[nb][a]);
                let (deriv, kind) = grid_partial(get, grid.spacing()[i])
                    .ok_or_else(|| Error::Invalid("grid too small for differences".into()))?;
                if kind != StencilKind::CentralFourth {
                    flagged = true;
                }
                worst = worst.max((deriv - f_val[a][i]).abs());
            }
        }
        leaf.leaf_residual[flat] = worst;
        leaf.boundary_flag[flat] = flagged;
    }
    Ok(())
}

/// Solve the total differential equation `df = F(x, f(x))`, `f(x0) = y0`, by
/// lifting the ray family `psi(t, lambda) = x0 + t lambda` with
/// `lambda = x - x0` and reading `f(x) = Psi(1)`. Rays are independent and
/// run in parallel.
pub fn solve_tde(
    dist: &GraphDistribution,
    x0: &[f64],
    y0: &[f64],
    grid: &GridSpec,
    step: f64,
) -> Result<LeafGrid> {
    if grid.dim() != dist.base_dim() {
        return Err(Error::Dimension("grid dimension != base dimension".into()));
    }
    if grid.center() != x0 {
        return Err(Error::Invalid(
            "grid must be centered at the base point x0".into(),
        ));
    }
    let base_box = dist.base_box();
    for (_, x) in grid.iter_points() {
        base_box.check(&x)?;
    }

    let indices: Vec<usize> = (0..grid.len()).collect();
    let results = par_map(indices, |flat| -> Result<(Vec<f64>, f64)> {
        let x = grid.point(flat);
        let lambda: Vec<f64> = x.iter().zip(x0).map(|(a, b)| a - b).collect();
        if lambda.iter().all(|l| *l == 0.0) {
            let mut p = x0.to_vec();
            p.extend_from_slice(y0);
            return Ok((y0.to_vec(), dist.levi_residual_at(&p)?));
        }
        let lift = dist.horizontal_lift_ray(x0, y0, &lambda, 1.0, step)?;
        let mut levi_worst = 0.0f64;
        for (i, t) in lift.breakpoints().iter().enumerate() {
            let mut p: Vec<f64> = x0.iter().zip(&lambda).map(|(a, l)| a + t * l).collect();
            p.extend_from_slice(&lift.states()[i]);
            levi_worst = levi_worst.max(dist.levi_residual_at(&p)?);
        }
        Ok((lift.end_state().to_vec(), levi_worst))
    });

    let mut values = Vec::with_capacity(grid.len());
    let mut levi_residual = Vec::with_capacity(grid.len());
    for r in results {
        let (value, levi) = r?;
        values.push(value);
        levi_residual.push(levi);
    }

    let mut leaf = LeafGrid {
        grid: grid.clone(),
        base_point: x0.to_vec(),
        values,
        levi_residual,
        leaf_residual: vec![0.0; grid.len()],
        boundary_flag: vec![false; grid.len()],
    };
    fill_leaf_residuals(dist, &mut leaf)?;
    Ok(leaf)
}

/// Check a candidate leaf: recomputes the leaf residual from the stored grid
/// values and samples the Levi form at the graph points.
pub fn check_leaf(dist: &GraphDistribution, leaf: &LeafGrid, tol: f64) -> Result<LeafReport> {
    let mut work = leaf.clone();
    fill_leaf_residuals(dist, &mut work)?;
    let mut max_levi = 0.0f64;
    for (flat, x) in work.grid.iter_points() {
        let mut p = x;
        p.extend_from_slice(&work.values[flat]);
        max_levi = max_levi.max(dist.levi_residual_at(&p)?);
    }
    let max_leaf = work.max_leaf_residual();
    Ok(LeafReport {
        max_leaf_residual: max_leaf,
        max_levi_residual: max_levi,
        tol,
        pass: max_leaf <= tol,
    })
}

/// One iterated-bracket obstruction entry.
#[derive(Debug, Clone)]
pub struct BracketObstruction {
    /// Nesting depth `s` of `[X_{i1}, [ ... [X_{is}, X_{i_{s+1}}] ... ]]`.
    pub order: usize,
    /// Frame indices, outermost first, 1-based.
    pub indices: Vec<usize>,
    /// Vertical defect `w - F(v)` of the bracket evaluated at `e0`.
    pub defect: Vec<f64>,
    pub magnitude: f64,
}

/// Evaluate all iterated brackets of the lifted frame fields at `e0` up to
/// the given order and return their vertical defects. An empty flagged list
/// (all magnitudes below [`DEFECT_TOL`]) is the local-integrability
/// certificate at `e0` for real-analytic data.
pub fn iterated_bracket_obstructions(
    dist: &GraphDistribution,
    e0: &[f64],
    max_order: usize,
    budget: usize,
) -> Result<Vec<BracketObstruction>> {
    dist.domain().check(e0)?;
    if max_order == 0 {
        return Err(Error::Invalid("max_order must be >= 1".into()));
    }
    let k = dist.base_dim();
    let frames: Vec<VectorFieldExpr> = (0..k)
        .map(|i| {
            let mut e = vec![0.0; k];
            e[i] = 1.0;
            dist.lifted_field(&e)
        })
        .collect::<Result<Vec<_>>>()?;

    let node_total =
        |f: &VectorFieldExpr| -> usize { f.components().iter().map(|c| c.node_count()).sum() };

    let mut out = Vec::new();
    // Level 1: [X_i, X_j] for i < j (antisymmetry covers the rest).
    let mut level: Vec<(Vec<usize>, VectorFieldExpr)> = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            let b = crate::geometry::lie_bracket(&frames[i], &frames[j])?;
            if node_total(&b) > budget {
                return Err(Error::ExpressionBudget { completed_order: 0 });
            }
            level.push((vec![i + 1, j + 1], b));
        }
    }
    for order in 1..=max_order {
        for (indices, bracket) in &level {
            let value = bracket.eval(e0)?;
            let defect = dist.vertical_defect(e0, &value)?;
            out.push(BracketObstruction {
                order,
                indices: indices.clone(),
                magnitude: inf_norm(&defect),
                defect,
            });
        }
        if order == max_order {
            break;
        }
        let mut next = Vec::with_capacity(level.len() * k);
        for (indices, bracket) in &level {
            for q in 0..k {
                let b = crate::geometry::lie_bracket(&frames[q], bracket)?;
                if node_total(&b) > budget {
                    return Err(Error::ExpressionBudget {
                        completed_order: order,
                    });
                }
                let mut idx = vec![q + 1];
                idx.extend_from_slice(indices);
                next.push((idx, b));
            }
        }
        level = next;
    }
    Ok(out)
}

/// Obstructions whose defect magnitude exceeds the tolerance.
pub fn flagged_obstructions(
    obstructions: &[BracketObstruction],
    tol: f64,
) -> Vec<&BracketObstruction> {
    obstructions.iter().filter(|o| o.magnitude > tol).collect()
}
