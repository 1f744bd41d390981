//! Local Cartan-Ambrose-Hicks construction: synthesize a candidate affine
//! map between charts with connections by sending radial geodesics to
//! induced geodesics and conjugating the prescribed differential by parallel
//! transports. Relatedness of torsion/curvature (the vanishing of the Levi
//! form of the graph distribution on `Lin(TM, TN)`) is the obstruction.
//!
//! Quotient identification for the Levi form, with `sigma` an `m x n`
//! matrix: `(v, w, tau) |-> (w - sigma v, tau)`; the resolved sign
//! convention is pinned by the flow-commutator oracle in the tests.

use nalgebra::DMatrix;

use crate::connection::{
    covariant_derivative_tensor, BundleConnection, TensorFieldExpr, TensorValue,
};
use crate::error::{Error, Result};
use crate::geometry::{grid_partial, mat_inf_norm, CurveSolution, GridSpec, StencilKind};
use crate::parallel::par_map;
use crate::spray::{base_curve, geodesic_spray, log_map, solve_spray, Spray};

/// A local CAH problem: source and target tangent connections, anchor
/// points, and the prescribed differential `sigma0` (no rank assumptions).
#[derive(Debug)]
pub struct CahProblem {
    source: BundleConnection,
    target: BundleConnection,
    x0: Vec<f64>,
    y0: Vec<f64>,
    sigma0: DMatrix<f64>,
    src_spray: Spray,
    tgt_spray: Spray,
    torsion_m: TensorFieldExpr,
    torsion_n: TensorFieldExpr,
    curvature_m: TensorFieldExpr,
    curvature_n: TensorFieldExpr,
}

impl CahProblem {
    pub fn new(
        source: BundleConnection,
        target: BundleConnection,
        x0: Vec<f64>,
        y0: Vec<f64>,
        sigma0: DMatrix<f64>,
    ) -> Result<Self> {
        if !source.is_tangent() || !target.is_tangent() {
            return Err(Error::NotTangent {
                fiber_rank: source.fiber_rank(),
                base_dim: source.base_dim(),
            });
        }
        let n = source.base_dim();
        let m = target.base_dim();
        if x0.len() != n || y0.len() != m {
            return Err(Error::Dimension(
                "anchor points have wrong dimensions".into(),
            ));
        }
        if sigma0.nrows() != m || sigma0.ncols() != n {
            return Err(Error::Dimension(format!(
                "sigma0 must be {m} x {n} (target rows, source columns)"
            )));
        }
        source.domain().check(&x0)?;
        target.domain().check(&y0)?;
        let src_spray = geodesic_spray(&source)?;
        let tgt_spray = geodesic_spray(&target)?;
        let torsion_m = source.torsion()?;
        let torsion_n = target.torsion()?;
        let curvature_m = source.curvature();
        let curvature_n = target.curvature();
        Ok(CahProblem {
            source,
            target,
            x0,
            y0,
            sigma0,
            src_spray,
            tgt_spray,
            torsion_m,
            torsion_n,
            curvature_m,
            curvature_n,
        })
    }

    pub fn source(&self) -> &BundleConnection {
        &self.source
    }

    pub fn target(&self) -> &BundleConnection {
        &self.target
    }

    pub fn source_dim(&self) -> usize {
        self.source.base_dim()
    }

    pub fn target_dim(&self) -> usize {
        self.target.base_dim()
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn y0(&self) -> &[f64] {
        &self.y0
    }

    pub fn sigma0(&self) -> &DMatrix<f64> {
        &self.sigma0
    }

    /// The induced geodesic `mu_x` on the target and the induced linear map
    /// `sigma_x = P^N sigma0 (P^M)^{-1}` for a source point `x`.
    ///
    /// `x = x0` bypasses the solvers: the anchor is exact.
    pub fn induced_geodesic_and_sigma(&self, x: &[f64], step: f64) -> Result<InducedData> {
        let n = self.source_dim();
        let m = self.target_dim();
        if x.len() != n {
            return Err(Error::Dimension("x must be a source point".into()));
        }
        if x == self.x0.as_slice() {
            let mut state = self.y0.clone();
            state.extend(vec![0.0; m]);
            return Ok(InducedData {
                mu: CurveSolution::constant(0.0, 1.0, &state),
                sigma: self.sigma0.clone(),
                v: vec![0.0; n],
            });
        }
        let v = log_map(&self.src_spray, &self.x0, x, step, 50)?;
        let gamma = solve_spray(&self.src_spray, &self.x0, &v, (0.0, 1.0), step)?;
        if let Some(t) = gamma.exit_time {
            return Err(Error::ChartExit {
                t,
                state: gamma.solution.end_state().to_vec(),
            });
        }
        let w: Vec<f64> = (0..m)
            .map(|a| (0..n).map(|b| self.sigma0[(a, b)] * v[b]).sum())
            .collect();
        let mu = solve_spray(&self.tgt_spray, &self.y0, &w, (0.0, 1.0), step)?;
        if let Some(t) = mu.exit_time {
            return Err(Error::ChartExit {
                t,
                state: mu.solution.end_state().to_vec(),
            });
        }
        let p_m = self
            .source
            .transport_matrix(base_curve(&gamma.solution, n), (0.0, 1.0), step)?;
        let p_n = self
            .target
            .transport_matrix(base_curve(&mu.solution, m), (0.0, 1.0), step)?;
        let p_m_inv = p_m
            .try_inverse()
            .ok_or_else(|| Error::SingularJacobian("source transport is singular".into()))?;
        let sigma = p_n * &self.sigma0 * p_m_inv;
        Ok(InducedData {
            mu: mu.solution,
            sigma,
            v,
        })
    }

    /// Build the CAH candidate map on a grid centered at `x0`: per node,
    /// `f(x) = mu_x(1)` with `sigma_x` and relatedness residuals recorded.
    /// Unreachable nodes are flagged; the map is returned on the reachable
    /// subgrid. Nodes are independent and run in parallel.
    pub fn cah_map(&self, grid: &GridSpec, step: f64) -> Result<AffineMapGrid> {
        let n = self.source_dim();
        if grid.dim() != n {
            return Err(Error::Dimension(
                "grid dimension != source dimension".into(),
            ));
        }
        if grid.center() != self.x0.as_slice() {
            return Err(Error::Invalid("grid must be centered at x0".into()));
        }
        let indices: Vec<usize> = (0..grid.len()).collect();
        let results = par_map(indices, |flat| {
            let x = grid.point(flat);
            match self.point_data(&x, step) {
                Ok(data) => (Some(data), None),
                Err(e) => (None, Some(e.to_string())),
            }
        });

        let mut f = vec![None; grid.len()];
        let mut sigma = vec![None; grid.len()];
        let mut relatedness = vec![None; grid.len()];
        let mut failures = vec![None; grid.len()];
        for (flat, (data, failure)) in results.into_iter().enumerate() {
            if let Some((fx, sx, rel)) = data {
                f[flat] = Some(fx);
                sigma[flat] = Some(sx);
                relatedness[flat] = Some(rel);
            }
            failures[flat] = failure;
        }

        let mut map = AffineMapGrid {
            grid: grid.clone(),
            f,
            sigma,
            relatedness,
            jacobian_residual: vec![None; grid.len()],
            boundary_flag: vec![false; grid.len()],
            failures,
        };
        self.fill_jacobian_residuals(&mut map);
        Ok(map)
    }

    fn point_data(
        &self,
        x: &[f64],
        step: f64,
    ) -> Result<(Vec<f64>, DMatrix<f64>, RelatednessResidual)> {
        let m = self.target_dim();
        let data = self.induced_geodesic_and_sigma(x, step)?;
        let fx = data.mu.end_state()[..m].to_vec();
        let rel = check_relates(
            &data.sigma,
            &self.torsion_m.eval_at(x)?,
            &self.torsion_n.eval_at(&fx)?,
            &self.curvature_m.eval_at(x)?,
            &self.curvature_n.eval_at(&fx)?,
        );
        Ok((fx, data.sigma, rel))
    }

    /// `|grid-Jacobian(f) - sigma_x|_inf` per node.
    fn fill_jacobian_residuals(&self, map: &mut AffineMapGrid) {
        let n = self.source_dim();
        let m = self.target_dim();
        let grid = map.grid.clone();
        for flat in 0..grid.len() {
            let (Some(sigma), Some(_)) = (&map.sigma[flat], &map.f[flat]) else {
                continue;
            };
            let mut worst = 0.0f64;
            let mut flagged = false;
            let mut complete = true;
            for i in 0..n {
                for a in 0..m {
                    let get = |delta: isize| {
                        grid.neighbor(flat, i, delta)
                            .and_then(|nb| map.f[nb].as_ref().map(|v| v[a]))
                    };
                    match grid_partial(get, grid.spacing()[i]) {
                        Some((deriv, kind)) => {
                            if kind != StencilKind::CentralFourth {
                                flagged = true;
                            }
                            worst = worst.max((deriv - sigma[(a, i)]).abs());
                        }
                        None => complete = false,
                    }
                }
            }
            if complete {
                map.jacobian_residual[flat] = Some(worst);
                map.boundary_flag[flat] = flagged;
            }
        }
    }

    /// Levi form of the graph distribution `D_sigma = Gr(sigma) (+) {0}` on
    /// `Lin(TM, TN)` at `(x, y, sigma)`, under the quotient identification
    /// `(v, w, tau) |-> (w - sigma v, tau)`:
    ///
    /// `( sigma T^M(v1,v2) - T^N(sigma v1, sigma v2),
    ///    sigma R^M(v1,v2) - R^N(sigma v1, sigma v2) sigma )`.
    pub fn levi_form_hom(
        &self,
        x: &[f64],
        y: &[f64],
        sigma: &DMatrix<f64>,
        v1: &[f64],
        v2: &[f64],
    ) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let n = self.source_dim();
        let m = self.target_dim();
        if x.len() != n || y.len() != m || v1.len() != n || v2.len() != n {
            return Err(Error::Dimension("levi_form_hom argument dimensions".into()));
        }
        let tm = self.torsion_m.eval_at(x)?;
        let tn = self.torsion_n.eval_at(y)?;
        let rm = self.curvature_m.eval_at(x)?;
        let rn = self.curvature_n.eval_at(y)?;

        // sigma T^M(v1, v2)
        let mut tm_vec = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                for a in 0..n {
                    tm_vec[a] += tm.get(&[i, j], &[a]) * v1[i] * v2[j];
                }
            }
        }
        let sigma_tm: Vec<f64> = (0..m)
            .map(|a| (0..n).map(|b| sigma[(a, b)] * tm_vec[b]).sum())
            .collect();
        // T^N(sigma v1, sigma v2)
        let sv1: Vec<f64> = (0..m)
            .map(|a| (0..n).map(|b| sigma[(a, b)] * v1[b]).sum())
            .collect();
        let sv2: Vec<f64> = (0..m)
            .map(|a| (0..n).map(|b| sigma[(a, b)] * v2[b]).sum())
            .collect();
        let mut tn_vec = vec![0.0; m];
        for i in 0..m {
            for j in 0..m {
                for a in 0..m {
                    tn_vec[a] += tn.get(&[i, j], &[a]) * sv1[i] * sv2[j];
                }
            }
        }
        let first: Vec<f64> = sigma_tm.iter().zip(&tn_vec).map(|(a, b)| a - b).collect();

        // sigma R^M(v1, v2) - R^N(sigma v1, sigma v2) sigma
        let mut rm_op = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                rm_op += rm.operator(&[i, j]) * (v1[i] * v2[j]);
            }
        }
        let mut rn_op = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                rn_op += rn.operator(&[i, j]) * (sv1[i] * sv2[j]);
            }
        }
        let second = sigma * rm_op - rn_op * sigma;
        Ok((first, second))
    }

    /// Per-order relatedness of `nabla^r T` and `nabla^r R` at the anchors
    /// under `sigma0`, for `r = 0..=max_order`.
    pub fn higher_order_check(
        &self,
        max_order: usize,
        budget: usize,
        tol: f64,
    ) -> Result<Vec<CahOrderReport>> {
        let mut out = Vec::with_capacity(max_order + 1);
        let mut tm = self.torsion_m.clone();
        let mut tn = self.torsion_n.clone();
        let mut rm = self.curvature_m.clone();
        let mut rn = self.curvature_n.clone();
        for order in 0..=max_order {
            if order > 0 {
                let map_err = |e: Error| match e {
                    Error::ExpressionBudget { .. } => Error::ExpressionBudget {
                        completed_order: order - 1,
                    },
                    other => other,
                };
                tm = covariant_derivative_tensor(&self.source, &self.source, &tm, 1, budget)
                    .map_err(map_err)?;
                tn = covariant_derivative_tensor(&self.target, &self.target, &tn, 1, budget)
                    .map_err(map_err)?;
                rm = covariant_derivative_tensor(&self.source, &self.source, &rm, 1, budget)
                    .map_err(map_err)?;
                rn = covariant_derivative_tensor(&self.target, &self.target, &rn, 1, budget)
                    .map_err(map_err)?;
            }
            let torsion_residual =
                relate_vector_tensors(&self.sigma0, &tm.eval_at(&self.x0)?, &tn.eval_at(&self.y0)?);
            let curvature_residual = relate_operator_tensors(
                &self.sigma0,
                &rm.eval_at(&self.x0)?,
                &rn.eval_at(&self.y0)?,
            );
            out.push(CahOrderReport {
                order,
                torsion_residual,
                curvature_residual,
                pass: torsion_residual <= tol && curvature_residual <= tol,
            });
        }
        Ok(out)
    }

    /// The covariant derivative of `df` along the graph `x -> (x, f(x))`:
    /// per interior node and direction `i`,
    /// `d_i sigma + omega^N_{sigma e_i}(f(x)) sigma - sigma omega^M_i(x)`,
    /// assembled from the product-connection coefficients. This vanishing is
    /// the definition of an affine map.
    pub fn affine_residual(&self, map: &AffineMapGrid, tol: f64) -> Result<AffineReport> {
        let n = self.source_dim();
        let m = self.target_dim();
        let grid = &map.grid;
        let mut max_interior = 0.0f64;
        let mut max_all = 0.0f64;
        let mut interior_points = 0usize;
        for flat in 0..grid.len() {
            let (Some(sigma), Some(fx)) = (&map.sigma[flat], &map.f[flat]) else {
                continue;
            };
            let x = grid.point(flat);
            let omega_m = self.source.omega_at(&x)?;
            let omega_n = self.target.omega_at(fx)?;
            let mut worst = 0.0f64;
            let mut full_stencil = true;
            let mut complete = true;
            for i in 0..n {
                // grid derivative of sigma along axis i
                let mut d_sigma = DMatrix::zeros(m, n);
                for a in 0..m {
                    for b in 0..n {
                        let get = |delta: isize| {
                            grid.neighbor(flat, i, delta)
                                .and_then(|nb| map.sigma[nb].as_ref().map(|s| s[(a, b)]))
                        };
                        match grid_partial(get, grid.spacing()[i]) {
                            Some((deriv, kind)) => {
                                if kind != StencilKind::CentralFourth {
                                    full_stencil = false;
                                }
                                d_sigma[(a, b)] = deriv;
                            }
                            None => complete = false,
                        }
                    }
                }
                if !complete {
                    break;
                }
                // omega^N along the pushed direction sigma e_i
                let mut omega_n_dir = DMatrix::zeros(m, m);
                for d in 0..m {
                    omega_n_dir += &omega_n[d] * sigma[(d, i)];
                }
                let residual = d_sigma + omega_n_dir * sigma - sigma * &omega_m[i];
                worst = worst.max(mat_inf_norm(&residual));
            }
            if !complete {
                continue;
            }
            max_all = max_all.max(worst);
            if full_stencil {
                max_interior = max_interior.max(worst);
                interior_points += 1;
            }
        }
        Ok(AffineReport {
            max_interior_residual: max_interior,
            max_residual: max_all,
            interior_points,
            tol,
            pass: interior_points > 0 && max_interior <= tol,
        })
    }
}

/// Induced target geodesic and linear map for one source point.
#[derive(Debug, Clone)]
pub struct InducedData {
    /// Dense target-spray state `(y, y')` over `t in [0, 1]`.
    pub mu: CurveSolution,
    /// `sigma_x = P^N sigma0 (P^M)^{-1}`.
    pub sigma: DMatrix<f64>,
    /// The source shot vector `log_{x0}(x)`.
    pub v: Vec<f64>,
}

/// Relatedness residuals of a linear map at a paired point.
#[derive(Debug, Clone, Copy)]
pub struct RelatednessResidual {
    /// `max |sigma T^M(u, v) - T^N(sigma u, sigma v)|` over basis pairs.
    pub torsion: f64,
    /// `max |sigma R^M(u, v) - R^N(sigma u, sigma v) sigma|` over basis pairs.
    pub curvature: f64,
    /// Max tensor entry magnitude, for scale-aware thresholds.
    pub scale: f64,
}

impl RelatednessResidual {
    /// Residual normalized by `max(1, scale)`.
    pub fn normalized(&self) -> (f64, f64) {
        let s = self.scale.max(1.0);
        (self.torsion / s, self.curvature / s)
    }
}

/// Compare torsion and curvature of two connections under a linear map, at
/// one paired point (tensor values supplied by the caller).
pub fn check_relates(
    sigma: &DMatrix<f64>,
    tm: &TensorValue,
    tn: &TensorValue,
    rm: &TensorValue,
    rn: &TensorValue,
) -> RelatednessResidual {
    let torsion = relate_vector_tensors(sigma, tm, tn);
    let curvature = relate_operator_tensors(sigma, rm, rn);
    let scale = tm
        .max_abs()
        .max(tn.max_abs())
        .max(rm.max_abs())
        .max(rn.max_abs());
    RelatednessResidual {
        torsion,
        curvature,
        scale,
    }
}

/// `max |sigma T^M(e_I) - T^N(sigma e_I)|` over source index tuples, for
/// vector-valued covariant tensors of any arity.
fn relate_vector_tensors(sigma: &DMatrix<f64>, tm: &TensorValue, tn: &TensorValue) -> f64 {
    let n = sigma.ncols();
    let m = sigma.nrows();
    let tgt_multis = tn.cov_indices();
    let mut worst = 0.0f64;
    for src in tm.cov_indices() {
        // lhs = sigma . T^M(e_I)
        let tm_vec = tm.vector(&src);
        let lhs: Vec<f64> = (0..m)
            .map(|a| (0..n).map(|b| sigma[(a, b)] * tm_vec[b]).sum())
            .collect();
        // rhs_c = sum over target multis of prod sigma entries
        let mut rhs = vec![0.0; m];
        for tgt in &tgt_multis {
            let mut weight = 1.0;
            for (slot, &a) in tgt.iter().enumerate() {
                weight *= sigma[(a, src[slot])];
                if weight == 0.0 {
                    break;
                }
            }
            if weight == 0.0 {
                continue;
            }
            let tn_vec = tn.vector(tgt);
            for c in 0..m {
                rhs[c] += weight * tn_vec[c];
            }
        }
        for c in 0..m {
            worst = worst.max((lhs[c] - rhs[c]).abs());
        }
    }
    worst
}

/// `max |sigma Op^M(e_I) - Op^N(sigma e_I) sigma|` over source index tuples,
/// for operator-valued covariant tensors of any arity.
fn relate_operator_tensors(sigma: &DMatrix<f64>, rm: &TensorValue, rn: &TensorValue) -> f64 {
    let tgt_multis = rn.cov_indices();
    let m = sigma.nrows();
    let mut worst = 0.0f64;
    for src in rm.cov_indices() {
        let lhs = sigma * rm.operator(&src);
        let mut rn_contracted = DMatrix::zeros(m, m);
        for tgt in &tgt_multis {
            let mut weight = 1.0;
            for (slot, &a) in tgt.iter().enumerate() {
                weight *= sigma[(a, src[slot])];
                if weight == 0.0 {
                    break;
                }
            }
            if weight == 0.0 {
                continue;
            }
            rn_contracted += rn.operator(tgt) * weight;
        }
        let rhs = rn_contracted * sigma;
        worst = worst.max(mat_inf_norm(&(lhs - rhs)));
    }
    worst
}

/// The CAH candidate map on a grid.
#[derive(Debug, Clone)]
pub struct AffineMapGrid {
    pub grid: GridSpec,
    pub f: Vec<Option<Vec<f64>>>,
    pub sigma: Vec<Option<DMatrix<f64>>>,
    pub relatedness: Vec<Option<RelatednessResidual>>,
    /// `|grid-Jacobian(f) - sigma_x|_inf` where computable.
    pub jacobian_residual: Vec<Option<f64>>,
    /// Node used a reduced-order stencil.
    pub boundary_flag: Vec<bool>,
    pub failures: Vec<Option<String>>,
}

impl AffineMapGrid {
    pub fn max_jacobian_residual(&self) -> f64 {
        self.jacobian_residual
            .iter()
            .flatten()
            .fold(0.0f64, |a, r| a.max(*r))
    }

    pub fn max_relatedness(&self) -> (f64, f64) {
        self.relatedness
            .iter()
            .flatten()
            .fold((0.0f64, 0.0f64), |acc, r| {
                (acc.0.max(r.torsion), acc.1.max(r.curvature))
            })
    }

    pub fn reachable(&self) -> usize {
        self.f.iter().flatten().count()
    }
}

/// Per-order higher-order CAH report.
#[derive(Debug, Clone)]
pub struct CahOrderReport {
    pub order: usize,
    pub torsion_residual: f64,
    pub curvature_residual: f64,
    pub pass: bool,
}

/// Affine (`nabla df = 0`) verification report.
#[derive(Debug, Clone)]
pub struct AffineReport {
    pub max_interior_residual: f64,
    pub max_residual: f64,
    pub interior_points: usize,
    pub tol: f64,
    pub pass: bool,
}

/// One order line of the affine-symmetry criterion.
#[derive(Debug, Clone)]
pub struct SymmetryOrderReport {
    pub order: usize,
    /// "torsion" for even orders (`nabla^(2r) T`), "curvature" for odd
    /// (`nabla^(2r+1) R`).
    pub kind: &'static str,
    pub max_norm: f64,
    pub pass: bool,
    /// An index tuple realizing the max, when it fails.
    pub witness: Option<Vec<usize>>,
}

/// Result of the affine-symmetry criterion at a point.
#[derive(Debug)]
pub struct SymmetryReport {
    pub orders: Vec<SymmetryOrderReport>,
    pub criterion_pass: bool,
    /// The constructed symmetry map (present when the criterion passed).
    pub map: Option<AffineMapGrid>,
    pub affine: Option<AffineReport>,
}

/// Check the even-torsion / odd-curvature vanishing criterion at `x0` up to
/// order `max_order`; when it passes, construct the candidate symmetry map
/// (`sigma0 = -Id`) on the grid and report its affine residual.
pub fn affine_symmetry_check(
    conn: &BundleConnection,
    x0: &[f64],
    max_order: usize,
    grid: &GridSpec,
    step: f64,
    tol: f64,
    budget: usize,
) -> Result<SymmetryReport> {
    if !conn.is_tangent() {
        return Err(Error::NotTangent {
            fiber_rank: conn.fiber_rank(),
            base_dim: conn.base_dim(),
        });
    }
    let mut orders = Vec::new();
    let mut torsion = conn.torsion()?;
    let mut curvature = conn.curvature();
    let mut torsion_order = 0usize;
    let mut curvature_order = 0usize;
    let mut all_pass = true;
    for order in 0..=max_order {
        let even = order % 2 == 0;
        let (value, kind) = if even {
            while torsion_order < order {
                torsion = covariant_derivative_tensor(conn, conn, &torsion, 1, budget)?;
                torsion_order += 1;
            }
            (torsion.eval_at(x0)?, "torsion")
        } else {
            while curvature_order < order {
                curvature = covariant_derivative_tensor(conn, conn, &curvature, 1, budget)?;
                curvature_order += 1;
            }
            (curvature.eval_at(x0)?, "curvature")
        };
        let mut max_norm = 0.0f64;
        let mut witness = None;
        for cov in value.cov_indices() {
            let norm = match value.fiber() {
                crate::connection::FiberShape::Vector(_) => {
                    crate::geometry::inf_norm(&value.vector(&cov))
                }
                crate::connection::FiberShape::Operator(_) => mat_inf_norm(&value.operator(&cov)),
            };
            if norm > max_norm {
                max_norm = norm;
                witness = Some(cov.clone());
            }
        }
        let pass = max_norm <= tol;
        all_pass &= pass;
        orders.push(SymmetryOrderReport {
            order,
            kind,
            max_norm,
            pass,
            witness: if pass { None } else { witness },
        });
    }

    if !all_pass {
        return Ok(SymmetryReport {
            orders,
            criterion_pass: false,
            map: None,
            affine: None,
        });
    }
    let n = conn.base_dim();
    let minus_identity = -DMatrix::<f64>::identity(n, n);
    let problem = CahProblem::new(
        conn.clone(),
        conn.clone(),
        x0.to_vec(),
        x0.to_vec(),
        minus_identity,
    )?;
    let map = problem.cah_map(grid, step)?;
    let affine = problem.affine_residual(&map, tol.max(1e-5))?;
    Ok(SymmetryReport {
        orders,
        criterion_pass: true,
        map: Some(map),
        affine: Some(affine),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::ScalarExpr;
    use crate::fixtures;
    use crate::geometry::{flow_commutator_oracle, inf_norm, VectorFieldExpr};
    use rand::{Rng, SeedableRng};

    fn flat2() -> BundleConnection {
        fixtures::flat_connection(2)
    }

    #[test]
    fn induced_data_at_the_anchor_is_exact() {
        let prob = CahProblem::new(
            fixtures::sphere_connection(),
            fixtures::sphere_connection(),
            vec![1.0, 0.3],
            vec![1.0, 0.3],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let data = prob.induced_geodesic_and_sigma(&[1.0, 0.3], 1e-3).unwrap();
        assert_eq!(data.sigma, DMatrix::identity(2, 2));
        assert_eq!(data.mu.end_state()[..2], [1.0, 0.3]);
    }

    #[test]
    fn flat_to_flat_induced_map_is_affine() {
        let sigma0 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.3]);
        let prob = CahProblem::new(
            flat2(),
            fixtures::flat_connection(2),
            vec![0.0, 0.0],
            vec![0.1, -0.1],
            sigma0.clone(),
        )
        .unwrap();
        let x = [0.3, -0.2];
        let data = prob.induced_geodesic_and_sigma(&x, 1e-2).unwrap();
        // mu(1) = y0 + sigma0 (x - x0); sigma_x = sigma0
        let expect = [
            0.1 + sigma0[(0, 0)] * 0.3 + sigma0[(0, 1)] * -0.2,
            -0.1 + sigma0[(1, 0)] * 0.3 + sigma0[(1, 1)] * -0.2,
        ];
        let end = data.mu.end_state();
        assert!((end[0] - expect[0]).abs() < 1e-9 && (end[1] - expect[1]).abs() < 1e-9);
        assert!(mat_inf_norm(&(&data.sigma - &sigma0)) < 1e-10);
    }

    #[test]
    fn sphere_self_map_with_identity_sigma_is_identity() {
        let conn = fixtures::sphere_connection();
        let x0 = vec![1.0, 0.3];
        let prob = CahProblem::new(
            conn.clone(),
            conn,
            x0.clone(),
            x0.clone(),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let grid = GridSpec::uniform(&x0, 0.08, 5).unwrap();
        let map = prob.cah_map(&grid, 1e-3).unwrap();
        assert_eq!(map.reachable(), grid.len());
        for (flat, x) in grid.iter_points() {
            let f = map.f[flat].as_ref().unwrap();
            for c in 0..2 {
                assert!((f[c] - x[c]).abs() < 1e-8, "f != id at {x:?}");
            }
            let sigma = map.sigma[flat].as_ref().unwrap();
            assert!(mat_inf_norm(&(sigma - DMatrix::<f64>::identity(2, 2))) < 1e-8);
        }
        let (t_res, r_res) = map.max_relatedness();
        assert!(t_res < 1e-10 && r_res < 1e-8);
    }

    #[test]
    fn sphere_rotation_is_reproduced_in_coordinates() {
        let conn = fixtures::sphere_connection();
        let alpha = 0.7;
        let x0 = vec![1.0, 0.2];
        let y0 = vec![1.0, 0.2 + alpha];
        let prob =
            CahProblem::new(conn.clone(), conn, x0.clone(), y0, DMatrix::identity(2, 2)).unwrap();
        let grid = GridSpec::uniform(&x0, 0.1, 7).unwrap();
        let map = prob.cah_map(&grid, 1e-3).unwrap();
        for (flat, x) in grid.iter_points() {
            let f = map.f[flat].as_ref().unwrap();
            assert!(
                (f[0] - x[0]).abs() < 1e-6,
                "theta error {}",
                (f[0] - x[0]).abs()
            );
            assert!((f[1] - (x[1] + alpha)).abs() < 1e-6);
        }
        let (t_res, r_res) = map.max_relatedness();
        assert!(t_res < 1e-8 && r_res < 1e-8);
        let affine = prob.affine_residual(&map, 1e-5).unwrap();
        assert!(
            affine.pass,
            "nabla df residual {}",
            affine.max_interior_residual
        );
    }

    #[test]
    fn relatedness_examples() {
        // both flat: zero residuals
        let prob = CahProblem::new(
            flat2(),
            fixtures::flat_connection(2),
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            DMatrix::from_row_slice(2, 2, &[0.3, 1.0, -2.0, 0.4]),
        )
        .unwrap();
        let rel = prob.point_data(&[0.2, 0.1], 1e-2).unwrap().2;
        assert_eq!(rel.torsion, 0.0);
        assert_eq!(rel.curvature, 0.0);

        // sphere -> flat with identity sigma: curvature obstruction ~ |R| = 1
        let prob = CahProblem::new(
            fixtures::sphere_connection(),
            fixtures::flat_connection(2),
            vec![1.0, 0.3],
            vec![0.0, 0.0],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let rel = prob.point_data(&[1.0, 0.3], 1e-3).unwrap().2;
        assert!(rel.curvature > 0.5, "curvature residual {}", rel.curvature);
    }

    #[test]
    fn levi_form_hom_vanishes_iff_relates() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(83);
        let prob = CahProblem::new(
            fixtures::sphere_connection(),
            fixtures::sphere_connection(),
            vec![1.0, 0.3],
            vec![1.0, 0.3],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        for _ in 0..200 {
            let x = vec![rng.random_range(0.5..2.5), rng.random_range(-1.0..1.0)];
            let y = vec![rng.random_range(0.5..2.5), rng.random_range(-1.0..1.0)];
            let sigma = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let rel = check_relates(
                &sigma,
                &prob.torsion_m.eval_at(&x).unwrap(),
                &prob.torsion_n.eval_at(&y).unwrap(),
                &prob.curvature_m.eval_at(&x).unwrap(),
                &prob.curvature_n.eval_at(&y).unwrap(),
            );
            // Levi form maxima over the basis pairs
            let mut levi_t = 0.0f64;
            let mut levi_r = 0.0f64;
            for i in 0..2 {
                for j in 0..2 {
                    let mut e_i = vec![0.0; 2];
                    let mut e_j = vec![0.0; 2];
                    e_i[i] = 1.0;
                    e_j[j] = 1.0;
                    let (first, second) = prob.levi_form_hom(&x, &y, &sigma, &e_i, &e_j).unwrap();
                    levi_t = levi_t.max(inf_norm(&first));
                    levi_r = levi_r.max(mat_inf_norm(&second));
                }
            }
            let both_zero = levi_t < 1e-8 && levi_r < 1e-8;
            let relates = rel.torsion < 1e-8 && rel.curvature < 1e-8;
            assert_eq!(both_zero, relates);
            assert!((levi_t - rel.torsion).abs() < 1e-10);
            assert!((levi_r - rel.curvature).abs() < 1e-10);
        }
    }

    /// Flow-commutator oracle on the `(n + m + mn)`-dimensional total space
    /// `(x, y, sigma)`: in coordinates, the lifted horizontal field of a
    /// constant `v` is
    /// `X~ = (v, sigma v, sigma omega^M_v(x) - omega^N_{sigma v}(y) sigma)`
    /// (the third block is the coordinate velocity of a connection-parallel
    /// sigma). The numeric commutator, converted back to the connection
    /// splitting and the quotient, must reproduce `levi_form_hom`.
    #[test]
    fn levi_form_hom_matches_flow_commutator_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(89);
        let source = fixtures::sphere_connection();
        let target = fixtures::stereographic_sphere_connection();
        let prob = CahProblem::new(
            source.clone(),
            target.clone(),
            vec![1.0, 0.3],
            vec![0.1, 0.2],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let (n, m) = (2usize, 2usize);
        // total-space coordinates x1, x2, y1, y2, s11, s12, s21, s22
        let mut coords: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        coords.extend((1..=m).map(|a| format!("y{a}")));
        for a in 1..=m {
            for b in 1..=n {
                coords.push(format!("s{a}{b}"));
            }
        }
        // target coefficients live on y-coordinates in the product chart
        let rename: std::collections::HashMap<String, String> = (1..=m)
            .map(|j| (format!("x{j}"), format!("y{j}")))
            .collect();
        let omega_n: Vec<Vec<Vec<ScalarExpr>>> = target
            .omega()
            .iter()
            .map(|mat| {
                mat.iter()
                    .map(|row| row.iter().map(|e| e.rename_vars(&rename)).collect())
                    .collect()
            })
            .collect();
        let s_var = |a: usize, b: usize| ScalarExpr::variable(&format!("s{}{}", a + 1, b + 1));

        let lifted = |v: &[f64]| -> VectorFieldExpr {
            let mut comps: Vec<ScalarExpr> = v.iter().map(|c| ScalarExpr::constant(*c)).collect();
            // y-block: sigma v
            for a in 0..m {
                let terms: Vec<ScalarExpr> = (0..n)
                    .map(|b| ScalarExpr::mul(&ScalarExpr::constant(v[b]), &s_var(a, b)))
                    .collect();
                comps.push(ScalarExpr::sum(&terms));
            }
            // sigma-block entry (a, b):
            //   sum_{c,i} v_i s_{ac} omega^M_i[c][b](x)
            // - sum_{c,d,e} v_e s_{de} omega^N_d[a][c](y) s_{cb}
            for a in 0..m {
                for b in 0..n {
                    let mut terms = Vec::new();
                    for c in 0..n {
                        for i in 0..n {
                            terms.push(ScalarExpr::product(&[
                                ScalarExpr::constant(v[i]),
                                s_var(a, c),
                                source.omega()[i][c][b].clone(),
                            ]));
                        }
                    }
                    for c in 0..m {
                        for d in 0..m {
                            for e in 0..n {
                                terms.push(ScalarExpr::neg(&ScalarExpr::product(&[
                                    ScalarExpr::constant(v[e]),
                                    s_var(d, e),
                                    omega_n[d][a][c].clone(),
                                    s_var(c, b),
                                ])));
                            }
                        }
                    }
                    comps.push(ScalarExpr::sum(&terms).simplify());
                }
            }
            VectorFieldExpr::new(coords.clone(), comps).unwrap()
        };

        for _ in 0..5 {
            let x = vec![rng.random_range(0.8..1.4), rng.random_range(-0.3..0.3)];
            let y = vec![rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
            let sigma = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let v1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v2: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();

            let mut point = x.clone();
            point.extend_from_slice(&y);
            for a in 0..m {
                for b in 0..n {
                    point.push(sigma[(a, b)]);
                }
            }
            let f1 = lifted(&v1);
            let f2 = lifted(&v2);
            let bracket = flow_commutator_oracle(&f1, &f2, &point, 1e-3).unwrap();
            let dx = &bracket[..n];
            let dy = &bracket[n..n + m];
            let dsigma = DMatrix::from_fn(m, n, |a, b| bracket[n + m + a * n + b]);

            // convert the coordinate sigma-velocity to the connection-vertical
            // component: tau = dsigma + omega^N_{dy}(y) sigma - sigma omega^M_{dx}(x)
            let omega_m_dx = source.omega_along(&x, dx).unwrap();
            let omega_n_dy = target.omega_along(&y, dy).unwrap();
            let tau = &dsigma + omega_n_dy * &sigma - &sigma * omega_m_dx;
            let sigma_dx: Vec<f64> = (0..m)
                .map(|a| (0..n).map(|b| sigma[(a, b)] * dx[b]).sum())
                .collect();
            let vertical_first: Vec<f64> = dy.iter().zip(&sigma_dx).map(|(w, s)| w - s).collect();

            let (first, second) = prob.levi_form_hom(&x, &y, &sigma, &v1, &v2).unwrap();
            for c in 0..m {
                assert!(
                    (vertical_first[c] - first[c]).abs() < 1e-2,
                    "first component mismatch: oracle {vertical_first:?} formula {first:?}"
                );
            }
            assert!(
                mat_inf_norm(&(tau.clone() - &second)) < 1e-2,
                "second component mismatch: oracle {tau} formula {second}"
            );
        }
    }

    #[test]
    fn higher_order_check_examples() {
        // flat -> flat: everything vanishes
        let prob = CahProblem::new(
            flat2(),
            fixtures::flat_connection(2),
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]),
        )
        .unwrap();
        let reports = prob.higher_order_check(3, 2_000_000, 1e-9).unwrap();
        assert!(reports.iter().all(|r| r.pass));

        // sphere self-map, identity sigma at the same anchor: all orders pass
        let conn = fixtures::sphere_connection();
        let x0 = vec![1.0, 0.3];
        let prob = CahProblem::new(
            conn.clone(),
            conn,
            x0.clone(),
            x0.clone(),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let reports = prob.higher_order_check(2, 2_000_000, 1e-8).unwrap();
        assert!(reports.iter().all(|r| r.pass));

        // radius 1 vs radius 2 in arclength charts: order 0 curvature fails
        // with residual 1 - 1/4 = 0.75 exactly
        let m_conn = fixtures::sphere_connection_radius(1.0);
        let n_conn = fixtures::sphere_connection_radius(2.0);
        let x0 = vec![std::f64::consts::FRAC_PI_2, 0.0];
        let y0 = vec![std::f64::consts::PI, 0.0];
        let prob = CahProblem::new(m_conn, n_conn, x0, y0, DMatrix::identity(2, 2)).unwrap();
        let reports = prob.higher_order_check(0, 2_000_000, 1e-8).unwrap();
        assert!(!reports[0].pass);
        assert!((reports[0].curvature_residual - 0.75).abs() < 1e-9);
    }

    #[test]
    fn affine_residual_flat_is_tiny_and_sphere_to_flat_is_obstructed() {
        let sigma0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, -0.2, 0.8]);
        let prob = CahProblem::new(
            flat2(),
            fixtures::flat_connection(2),
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            sigma0,
        )
        .unwrap();
        let grid = GridSpec::uniform(&[0.0, 0.0], 0.2, 7).unwrap();
        let map = prob.cah_map(&grid, 1e-2).unwrap();
        let report = prob.affine_residual(&map, 1e-12).unwrap();
        assert!(
            report.pass,
            "flat residual {}",
            report.max_interior_residual
        );

        // sphere -> flat: no affine map exists; residual at curvature scale
        let prob = CahProblem::new(
            fixtures::sphere_connection(),
            fixtures::flat_connection(2),
            vec![1.0, 0.3],
            vec![0.0, 0.0],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let grid = GridSpec::uniform(&[1.0, 0.3], 0.16, 9).unwrap();
        let map = prob.cah_map(&grid, 1e-3).unwrap();
        let report = prob.affine_residual(&map, 1e-5).unwrap();
        assert!(
            report.max_interior_residual > 1e-2,
            "obstructed residual {}",
            report.max_interior_residual
        );
    }

    #[test]
    fn affine_symmetry_flat_and_witness_failure() {
        // flat: criterion passes, symmetry map is x -> 2 x0 - x
        let conn = flat2();
        let x0 = [0.1, -0.2];
        let grid = GridSpec::uniform(&x0, 0.3, 5).unwrap();
        let report = affine_symmetry_check(&conn, &x0, 3, &grid, 1e-2, 1e-9, 2_000_000).unwrap();
        assert!(report.criterion_pass);
        let map = report.map.unwrap();
        for (flat, x) in grid.iter_points() {
            let f = map.f[flat].as_ref().unwrap();
            for c in 0..2 {
                assert!((f[c] - (2.0 * x0[c] - x[c])).abs() < 1e-9);
            }
        }

        // Gamma^1_{11} = x2: nabla R != 0 at a generic point; fails at
        // order 1 with a witness index
        let conn = fixtures::trace_obstructed_connection();
        let report =
            affine_symmetry_check(&conn, &[0.3, 0.5], 2, &grid, 1e-2, 1e-9, 2_000_000).unwrap();
        assert!(!report.criterion_pass);
        let failing = report.orders.iter().find(|o| !o.pass).unwrap();
        assert_eq!(failing.order, 1);
        assert_eq!(failing.kind, "curvature");
        assert!(failing.witness.is_some());
    }
}
