//! Recovery of a semi-Riemannian metric from a symmetric connection: extend
//! a nondegenerate symmetric form `g0` at a base point by parallel transport
//! along radial geodesics. The curvature antisymmetry hypothesis
//! (`P^-1 R P` must be `g0`-antisymmetric along the rays) is checked first;
//! when it holds, the recovered grid metric is parallel and the connection
//! is its Levi-Civita connection.

use nalgebra::DMatrix;

use crate::connection::{covariant_derivative_tensor, frame_state_to_matrix, BundleConnection};
use crate::error::{Error, Result};
use crate::geometry::{grid_partial, inf_norm, mat_inf_norm, GridSpec, StencilKind};
use crate::parallel::par_map;
use crate::spray::{base_curve, geodesic_spray, log_map, solve_spray};

/// A nondegenerate symmetric bilinear form at a base point.
#[derive(Debug, Clone)]
pub struct MetricSeed {
    pub base_point: Vec<f64>,
    pub g0: DMatrix<f64>,
    /// `(p, q)`: numbers of positive and negative eigenvalues.
    pub signature: (usize, usize),
}

impl MetricSeed {
    pub fn new(base_point: Vec<f64>, g0: DMatrix<f64>) -> Result<Self> {
        let n = base_point.len();
        if g0.nrows() != n || g0.ncols() != n {
            return Err(Error::BadMetricSeed(format!(
                "g0 must be {n} x {n} at an n-point"
            )));
        }
        let asym = mat_inf_norm(&(g0.clone() - g0.transpose()));
        if asym > 1e-12 {
            return Err(Error::BadMetricSeed(format!(
                "g0 is not symmetric (asymmetry {asym:.3e})"
            )));
        }
        let scale = mat_inf_norm(&g0).max(1e-300);
        let scaled = &g0 / scale;
        if scaled.determinant().abs() <= 1e-10 {
            return Err(Error::BadMetricSeed("g0 is degenerate".into()));
        }
        let signature = signature_of(&g0)?;
        Ok(MetricSeed {
            base_point,
            g0,
            signature,
        })
    }
}

/// Signature of a symmetric matrix by eigendecomposition.
pub fn signature_of(g: &DMatrix<f64>) -> Result<(usize, usize)> {
    let sym = (g + g.transpose()) * 0.5;
    let eigen = sym.symmetric_eigenvalues();
    let scale = eigen.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let mut pos = 0;
    let mut neg = 0;
    for v in eigen.iter() {
        if *v > 1e-10 * scale {
            pos += 1;
        } else if *v < -1e-10 * scale {
            neg += 1;
        } else {
            return Err(Error::BadMetricSeed("near-zero eigenvalue".into()));
        }
    }
    Ok((pos, neg))
}

/// Radial sampling plan for the hypothesis check: directions are shot as
/// geodesic initial velocities, and each ray is sampled at the given
/// parameter fractions.
#[derive(Debug, Clone)]
pub struct RadialSample {
    pub directions: Vec<Vec<f64>>,
    pub fractions: Vec<f64>,
}

impl RadialSample {
    /// Axis and diagonal directions at the given radius, sampled at the
    /// quarter points.
    pub fn standard(n: usize, radius: f64) -> Self {
        let mut directions = Vec::new();
        for i in 0..n {
            let mut d = vec![0.0; n];
            d[i] = radius;
            directions.push(d.clone());
            d[i] = -radius;
            directions.push(d);
        }
        let diag = radius / (n as f64).sqrt();
        directions.push(vec![diag; n]);
        directions.push(vec![-diag; n]);
        RadialSample {
            directions,
            fractions: vec![0.25, 0.5, 0.75, 1.0],
        }
    }
}

/// Result of the antisymmetry-hypothesis check.
#[derive(Debug, Clone)]
pub struct HypothesisReport {
    /// Max over samples of `|g0 A + A^T g0|_inf`, `A = P^-1 R(v, w) P`.
    pub max_residual: f64,
    pub samples: usize,
    pub tol: f64,
    pub pass: bool,
}

/// `g0 A + A^T g0` magnitude, the defect of `A` being `g0`-antisymmetric.
fn antisymmetry_defect(g0: &DMatrix<f64>, a: &DMatrix<f64>) -> f64 {
    mat_inf_norm(&(g0 * a + a.transpose() * g0))
}

/// Check the hypothesis: along each sampled radial geodesic, the pulled-back
/// curvature operators must be `g0`-antisymmetric. Requires a symmetric
/// (torsion-free) connection.
pub fn check_antisymmetry_hypothesis(
    conn: &BundleConnection,
    seed: &MetricSeed,
    sample: &RadialSample,
    step: f64,
    tol: f64,
) -> Result<HypothesisReport> {
    let n = conn.base_dim();
    if seed.base_point.len() != n {
        return Err(Error::Dimension(
            "seed base point has wrong dimension".into(),
        ));
    }
    assert_symmetric(conn, &seed.base_point)?;
    let spray = geodesic_spray(conn)?;
    let curvature = conn.curvature();
    let mut max_residual = 0.0f64;
    let mut samples = 0usize;
    for dir in &sample.directions {
        let run = solve_spray(&spray, &seed.base_point, dir, (0.0, 1.0), step)?;
        if run.exit_time.is_some() {
            return Err(Error::ChartExit {
                t: run.exit_time.unwrap(),
                state: run.solution.end_state().to_vec(),
            });
        }
        let frame = conn.transport_frame(base_curve(&run.solution, n), (0.0, 1.0), step)?;
        for &t in &sample.fractions {
            let state = run.solution.query(t)?;
            let x = &state[..n];
            let p = frame_state_to_matrix(&frame.query(t)?, n);
            let p_inv = p
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::SingularJacobian("transport frame is singular".into()))?;
            let r_val = curvature.eval_at(x)?;
            for i in 0..n {
                for j in (i + 1)..n {
                    let a = &p_inv * r_val.operator(&[i, j]) * &p;
                    max_residual = max_residual.max(antisymmetry_defect(&seed.g0, &a));
                    samples += 1;
                }
            }
        }
    }
    Ok(HypothesisReport {
        max_residual,
        samples,
        tol,
        pass: max_residual <= tol,
    })
}

fn assert_symmetric(conn: &BundleConnection, probe: &[f64]) -> Result<()> {
    let torsion = conn.torsion()?;
    let val = torsion.eval_at(probe)?;
    let residual = val.max_abs();
    if residual > 1e-12 {
        return Err(Error::NotSymmetric {
            residual,
            point: probe.to_vec(),
        });
    }
    Ok(())
}

/// Whether to require the antisymmetry hypothesis before recovery.
#[derive(Debug, Clone, Copy)]
pub enum HypothesisPolicy {
    /// Check along the grid-corner rays at this tolerance and fail if
    /// violated.
    Require(f64),
    /// Skip the check (negative testing: demonstrates a nonzero
    /// `nabla g` residual on hypothesis-violating connections).
    Override,
}

/// A recovered metric on a grid.
#[derive(Debug, Clone)]
pub struct MetricGrid {
    pub grid: GridSpec,
    pub base_point: Vec<f64>,
    pub g: Vec<DMatrix<f64>>,
    /// Compatibility residual `|nabla g|_inf` per point (grid derivatives).
    pub nabla_residual: Vec<f64>,
    /// Point used a reduced-order stencil.
    pub boundary_flag: Vec<bool>,
    pub signature: Vec<(usize, usize)>,
    /// Transport frame was ill-conditioned (`cond > 1e6`).
    pub cond_warn: Vec<bool>,
}

impl MetricGrid {
    /// Max `nabla g` residual over points with full-order stencils.
    pub fn max_interior_residual(&self) -> f64 {
        self.nabla_residual
            .iter()
            .zip(&self.boundary_flag)
            .filter(|(_, flagged)| !**flagged)
            .map(|(r, _)| *r)
            .fold(0.0f64, f64::max)
    }

    pub fn max_residual(&self) -> f64 {
        inf_norm(&self.nabla_residual)
    }
}

/// Recover the metric on a grid centered at the seed point: for each node
/// `m`, shoot the geodesic ray `exp(t log(m))`, transport the coordinate
/// frame along it and set `g_m = (P^-1)^T g0 P^-1`. Per-node rays are
/// independent and run in parallel.
pub fn recover_metric(
    conn: &BundleConnection,
    seed: &MetricSeed,
    grid: &GridSpec,
    step: f64,
    policy: HypothesisPolicy,
) -> Result<MetricGrid> {
    let n = conn.base_dim();
    if grid.dim() != n || seed.base_point.len() != n {
        return Err(Error::Dimension("grid/seed dimension mismatch".into()));
    }
    if grid.center() != seed.base_point.as_slice() {
        return Err(Error::Invalid(
            "grid must be centered at the seed point".into(),
        ));
    }
    assert_symmetric(conn, &seed.base_point)?;
    if let HypothesisPolicy::Require(tol) = policy {
        let radius = grid
            .spacing()
            .iter()
            .zip(grid.points_per_axis())
            .map(|(s, p)| s * (p / 2) as f64)
            .fold(0.0f64, f64::max);
        let report = check_antisymmetry_hypothesis(
            conn,
            seed,
            &RadialSample::standard(n, radius),
            step,
            tol,
        )?;
        if !report.pass {
            return Err(Error::HypothesisFailed {
                residual: report.max_residual,
                tol,
            });
        }
    }

    let spray = geodesic_spray(conn)?;
    let indices: Vec<usize> = (0..grid.len()).collect();
    let center_flat = grid.center_flat();
    let results = par_map(indices, |flat| -> Result<(DMatrix<f64>, bool)> {
        if flat == center_flat {
            return Ok((seed.g0.clone(), false));
        }
        let target = grid.point(flat);
        let v = log_map(&spray, &seed.base_point, &target, step, 50)?;
        let run = solve_spray(&spray, &seed.base_point, &v, (0.0, 1.0), step)?;
        if let Some(t) = run.exit_time {
            return Err(Error::ChartExit {
                t,
                state: run.solution.end_state().to_vec(),
            });
        }
        let p = conn.transport_matrix(base_curve(&run.solution, n), (0.0, 1.0), step)?;
        let svd = p.clone().svd(false, false);
        let cond = svd.singular_values.max() / svd.singular_values.min().max(1e-300);
        let p_inv = p
            .try_inverse()
            .ok_or_else(|| Error::SingularJacobian("transport frame is singular".into()))?;
        let g = p_inv.transpose() * &seed.g0 * &p_inv;
        Ok((g, cond > 1e6))
    });

    let mut g_values = Vec::with_capacity(grid.len());
    let mut cond_warn = Vec::with_capacity(grid.len());
    for r in results {
        let (g, warn) = r?;
        g_values.push(g);
        cond_warn.push(warn);
    }

    let (nabla_residual, boundary_flag) = nabla_g_residuals(conn, grid, &g_values)?;
    let signature = g_values
        .iter()
        .map(signature_of)
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricGrid {
        grid: grid.clone(),
        base_point: seed.base_point.clone(),
        g: g_values,
        nabla_residual,
        boundary_flag,
        signature,
        cond_warn,
    })
}

/// Per-point `|nabla g|_inf` from grid finite differences:
/// `d_i g_{jk} - Gamma^p_{ij} g_{pk} - Gamma^p_{ik} g_{jp}`.
fn nabla_g_residuals(
    conn: &BundleConnection,
    grid: &GridSpec,
    g_values: &[DMatrix<f64>],
) -> Result<(Vec<f64>, Vec<bool>)> {
    let n = conn.base_dim();
    let mut residuals = vec![0.0; grid.len()];
    let mut flags = vec![false; grid.len()];
    for flat in 0..grid.len() {
        let x = grid.point(flat);
        let omegas = conn.omega_at(&x)?;
        let mut worst = 0.0f64;
        let mut flagged = false;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let get =
                        |delta: isize| grid.neighbor(flat, i, delta).map(|nb| g_values[nb][(j, k)]);
                    let (deriv, kind) = grid_partial(get, grid.spacing()[i])
                        .ok_or_else(|| Error::Invalid("grid too small for differences".into()))?;
                    if kind != StencilKind::CentralFourth {
                        flagged = true;
                    }
                    let mut corr = 0.0;
                    for p in 0..n {
                        // Gamma^p_{ij} = (omega_i)^p_j
                        corr += omegas[i][(p, j)] * g_values[flat][(p, k)];
                        corr += omegas[i][(p, k)] * g_values[flat][(j, p)];
                    }
                    worst = worst.max((deriv - corr).abs());
                }
            }
        }
        residuals[flat] = worst;
        flags[flat] = flagged;
    }
    Ok((residuals, flags))
}

/// Levi-Civita verification report.
#[derive(Debug, Clone)]
pub struct LeviCivitaReport {
    pub max_torsion_residual: f64,
    /// Max `nabla g` residual over full-stencil interior points.
    pub max_nabla_g_residual: f64,
    /// Max over all points including reduced-order boundary stencils.
    pub max_nabla_g_residual_all: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Check that the connection is the Levi-Civita connection of the grid
/// metric: torsion must vanish and `nabla g` must vanish at the grid scale.
/// Pass/fail is decided on interior (full-stencil) points.
pub fn verify_levi_civita(
    conn: &BundleConnection,
    metric: &MetricGrid,
    tol: f64,
) -> Result<LeviCivitaReport> {
    let torsion = conn.torsion()?;
    let mut max_torsion = 0.0f64;
    for (_, x) in metric.grid.iter_points() {
        max_torsion = max_torsion.max(torsion.eval_at(&x)?.max_abs());
    }
    let (residuals, flags) = nabla_g_residuals(conn, &metric.grid, &metric.g)?;
    let interior = residuals
        .iter()
        .zip(&flags)
        .filter(|(_, f)| !**f)
        .map(|(r, _)| *r)
        .fold(0.0f64, f64::max);
    let all = inf_norm(&residuals);
    Ok(LeviCivitaReport {
        max_torsion_residual: max_torsion,
        max_nabla_g_residual: interior,
        max_nabla_g_residual_all: all,
        tol,
        pass: max_torsion <= tol && interior <= tol,
    })
}

/// Per-order result of the higher-order criterion.
#[derive(Debug, Clone)]
pub struct OrderReport {
    pub order: usize,
    /// Max `|g0 A + A^T g0|_inf` over evaluated index tuples.
    pub max_residual: f64,
}

/// Evaluate `nabla^k R` at the seed point for `k = 0..=max_order` and report
/// the worst `g0`-antisymmetry defect per order. All index combinations are
/// evaluated (dimensions at desk scale keep this small).
pub fn higher_order_metric_check(
    conn: &BundleConnection,
    seed: &MetricSeed,
    max_order: usize,
    budget: usize,
) -> Result<Vec<OrderReport>> {
    assert_symmetric(conn, &seed.base_point)?;
    let mut out = Vec::with_capacity(max_order + 1);
    let mut tensor = conn.curvature();
    for k in 0..=max_order {
        if k > 0 {
            tensor =
                covariant_derivative_tensor(conn, conn, &tensor, 1, budget).map_err(
                    |e| match e {
                        Error::ExpressionBudget { .. } => Error::ExpressionBudget {
                            completed_order: k - 1,
                        },
                        other => other,
                    },
                )?;
        }
        let value = tensor.eval_at(&seed.base_point)?;
        let mut worst = 0.0f64;
        for cov in value.cov_indices() {
            let a = value.operator(&cov);
            worst = worst.max(antisymmetry_defect(&seed.g0, &a));
        }
        out.push(OrderReport {
            order: k,
            max_residual: worst,
        });
    }
    Ok(out)
}
