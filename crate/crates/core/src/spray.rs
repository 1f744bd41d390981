//! Sprays: second-order vector fields on a chart, quadratically homogeneous
//! in velocity. Geodesic sprays come from tangent connections; general
//! sprays are accepted as raw acceleration expressions and validated against
//! the homogeneity contract `acc(x, a v) = a^2 acc(x, v)`.
//!
//! On top of spray solutions sit the exponential map (unit-time endpoint),
//! its Newton-inverse (the chart log map), a verified-usable normal-radius
//! estimate, and piecewise solutions.

use std::sync::OnceLock;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::connection::BundleConnection;
use crate::error::{Error, Result};
use crate::expr::{BoundExpr, ScalarExpr};
use crate::geometry::{
    finite_diff_jacobian, integrate_endpoint, integrate_raw, BoxDomain, CurveSolution,
};

/// Fixed seed for the random direction sample in radius estimation; keeps
/// reports bit-reproducible.
const DIRECTION_SEED: u64 = 0x1eaf;

/// A spray on a chart: `(x, v) -> (v, acceleration(x, v))` with
/// `acceleration` quadratically homogeneous in `v`.
///
/// The second-order (projection-compatibility) condition is structural for
/// this phase-space encoding — the x-velocity IS `v` — so only the
/// homogeneity half of the contract needs validating.
#[derive(Debug, Clone)]
pub struct Spray {
    base_dim: usize,
    acceleration: Vec<ScalarExpr>,
    domain: BoxDomain,
    coords: Vec<String>,
    bound: OnceLock<Vec<BoundExpr>>,
}

/// Phase-space coordinate names `x1..xn, v1..vn`.
pub fn spray_coords(n: usize) -> Vec<String> {
    let mut coords: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    coords.extend((1..=n).map(|i| format!("v{i}")));
    coords
}

impl Spray {
    /// Build a spray from raw acceleration expressions; validates the
    /// homogeneity contract at sampled scales and points.
    pub fn new(base_dim: usize, acceleration: Vec<ScalarExpr>, domain: BoxDomain) -> Result<Self> {
        let spray = Spray::new_unchecked(base_dim, acceleration, domain)?;
        spray.validate_homogeneity(1e-10)?;
        Ok(spray)
    }

    fn new_unchecked(
        base_dim: usize,
        acceleration: Vec<ScalarExpr>,
        domain: BoxDomain,
    ) -> Result<Self> {
        if acceleration.len() != base_dim || domain.dim() != base_dim {
            return Err(Error::Dimension("spray component/domain mismatch".into()));
        }
        let coords = spray_coords(base_dim);
        for comp in &acceleration {
            for var in comp.free_vars() {
                if !coords.contains(&var) {
                    return Err(Error::Dimension(format!(
                        "acceleration uses `{var}` outside x1..x{base_dim}, v1..v{base_dim}"
                    )));
                }
            }
        }
        Ok(Spray {
            base_dim,
            acceleration,
            domain,
            coords,
            bound: OnceLock::new(),
        })
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn acceleration(&self) -> &[ScalarExpr] {
        &self.acceleration
    }

    fn bound(&self) -> &Vec<BoundExpr> {
        self.bound.get_or_init(|| {
            self.acceleration
                .iter()
                .map(|c| c.bind(&self.coords).expect("validated"))
                .collect()
        })
    }

    /// Evaluate the acceleration at `(x, v)`.
    pub fn acc(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let mut state = x.to_vec();
        state.extend_from_slice(v);
        let mut scratch = Vec::new();
        self.bound()
            .iter()
            .map(|b| b.eval_with(&state, &mut scratch))
            .collect()
    }

    /// Check `acc(x, a v) = a^2 acc(x, v)` at scales `{-2, -1, 0.5, 3}` and
    /// deterministic sample points inside the chart.
    pub fn validate_homogeneity(&self, tol: f64) -> Result<()> {
        let n = self.base_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(DIRECTION_SEED);
        for _ in 0..6 {
            let x: Vec<f64> = self
                .domain
                .intervals()
                .iter()
                .map(|(lo, hi)| {
                    let (lo, hi) = (lo.max(-1e3), hi.min(1e3));
                    let mid = 0.5 * (lo + hi);
                    let half = 0.4 * (hi - lo);
                    mid + half * rng.random_range(-1.0..1.0)
                })
                .collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let base = self.acc(&x, &v)?;
            for scale in [-2.0, -1.0, 0.5, 3.0] {
                let scaled: Vec<f64> = v.iter().map(|c| c * scale).collect();
                let got = self.acc(&x, &scaled)?;
                for c in 0..n {
                    let expect = scale * scale * base[c];
                    let residual = (got[c] - expect).abs();
                    if residual > tol * expect.abs().max(1.0) {
                        return Err(Error::NotHomogeneous { residual, scale });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Geodesic spray of a tangent connection:
/// `acc^a(x, v) = -sum_{ij} Gamma^a_{ij}(x) v^i v^j`.
pub fn geodesic_spray(conn: &BundleConnection) -> Result<Spray> {
    if !conn.is_tangent() {
        return Err(Error::NotTangent {
            fiber_rank: conn.fiber_rank(),
            base_dim: conn.base_dim(),
        });
    }
    let n = conn.base_dim();
    let mut acceleration = Vec::with_capacity(n);
    for a in 0..n {
        let mut terms = Vec::new();
        for i in 0..n {
            for j in 0..n {
                terms.push(ScalarExpr::neg(&ScalarExpr::product(&[
                    conn.gamma(a, i, j).clone(),
                    ScalarExpr::variable(&format!("v{}", i + 1)),
                    ScalarExpr::variable(&format!("v{}", j + 1)),
                ])));
            }
        }
        acceleration.push(ScalarExpr::sum(&terms).simplify());
    }
    // quadratic in v by construction; skip the sampling validator
    Spray::new_unchecked(n, acceleration, conn.domain().clone())
}

/// A spray trajectory, possibly truncated at a chart exit.
#[derive(Debug, Clone)]
pub struct SprayRun {
    /// Dense `(x, v)` solution up to the last in-chart breakpoint.
    pub solution: CurveSolution,
    /// Time of the chart exit, when the run stopped early.
    pub exit_time: Option<f64>,
}

/// Integrate `(x', v') = (v, acc(x, v))` from `(x, v)`; stops at a chart
/// exit, returning the partial trajectory and the exit time.
pub fn solve_spray(
    spray: &Spray,
    x: &[f64],
    v: &[f64],
    t_span: (f64, f64),
    step: f64,
) -> Result<SprayRun> {
    let n = spray.base_dim();
    if x.len() != n || v.len() != n {
        return Err(Error::Dimension(
            "spray initial data has wrong dimension".into(),
        ));
    }
    spray.domain().check(x)?;
    let mut y0 = x.to_vec();
    y0.extend_from_slice(v);
    let mut state = vec![0.0; 2 * n];
    let mut scratch = Vec::new();
    let bound = spray.bound();
    let raw = integrate_raw(
        |_t, y: &[f64], dy: &mut [f64]| {
            spray.domain().check(&y[..n])?;
            state.copy_from_slice(y);
            for c in 0..n {
                dy[c] = y[n + c];
            }
            for c in 0..n {
                dy[n + c] = bound[c].eval_with(&state, &mut scratch)?;
            }
            Ok(())
        },
        &y0,
        t_span,
        step,
    )?;
    match (raw.solution, raw.exit) {
        (Some(solution), exit) => Ok(SprayRun {
            solution,
            exit_time: exit.map(|(t, _)| t),
        }),
        (None, Some((t, state))) => Err(Error::ChartExit { t, state }),
        (None, None) => unreachable!("integration returns a solution or an exit"),
    }
}

/// Adapter: view a spray solution as a base curve `t -> (x(t), v(t))`.
pub fn base_curve(
    solution: &CurveSolution,
    n: usize,
) -> impl Fn(f64) -> Result<(Vec<f64>, Vec<f64>)> + '_ {
    move |t: f64| {
        let (y, _) = solution.sample(t)?;
        Ok((y[..n].to_vec(), y[n..].to_vec()))
    }
}

/// Exponential map: the `t = 1` endpoint of the spray solution with initial
/// velocity `v`.
pub fn exp_map(spray: &Spray, x: &[f64], v: &[f64], step: f64) -> Result<Vec<f64>> {
    let n = spray.base_dim();
    if x.len() != n || v.len() != n {
        return Err(Error::Dimension("exp_map needs n-vectors".into()));
    }
    spray.domain().check(x)?;
    if v.iter().all(|c| *c == 0.0) {
        return Ok(x.to_vec());
    }
    let mut y0 = x.to_vec();
    y0.extend_from_slice(v);
    let mut state = vec![0.0; 2 * n];
    let mut scratch = Vec::new();
    let bound = spray.bound();
    let end = integrate_endpoint(
        |_t, y: &[f64], dy: &mut [f64]| {
            spray.domain().check(&y[..n])?;
            state.copy_from_slice(y);
            for c in 0..n {
                dy[c] = y[n + c];
            }
            for c in 0..n {
                dy[n + c] = bound[c].eval_with(&state, &mut scratch)?;
            }
            Ok(())
        },
        &y0,
        (0.0, 1.0),
        step,
    )?;
    Ok(end[..n].to_vec())
}

/// Inverse of the exponential map by damped Newton iteration with a
/// finite-difference Jacobian; initial guess `v = target - x`.
pub fn log_map(
    spray: &Spray,
    x: &[f64],
    target: &[f64],
    step: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let n = spray.base_dim();
    if x.len() != n || target.len() != n {
        return Err(Error::Dimension("log_map needs n-vectors".into()));
    }
    spray.domain().check(target)?;
    let mut v: Vec<f64> = target.iter().zip(x).map(|(t, x)| t - x).collect();
    let residual_of = |v: &[f64]| -> Result<(Vec<f64>, f64)> {
        let end = exp_map(spray, x, v, step)?;
        let r: Vec<f64> = end.iter().zip(target).map(|(e, t)| e - t).collect();
        let norm = r.iter().map(|c| c * c).sum::<f64>().sqrt();
        Ok((r, norm))
    };
    let (mut res, mut norm) = residual_of(&v)?;
    for _iter in 0..max_iter {
        if norm < 1e-9 {
            return Ok(v);
        }
        let jac = finite_diff_jacobian(|vv: &[f64]| exp_map(spray, x, vv, step), &v, 1e-6)?;
        let rhs = DVector::from_column_slice(&res);
        let delta = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::SingularJacobian("d exp is singular at the iterate".into()))?;
        // backtracking line search on the Newton step
        let mut damping = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let trial: Vec<f64> = v
                .iter()
                .enumerate()
                .map(|(c, vc)| vc - damping * delta[c])
                .collect();
            match residual_of(&trial) {
                Ok((r, nrm)) if nrm < norm => {
                    v = trial;
                    res = r;
                    norm = nrm;
                    accepted = true;
                    break;
                }
                _ => damping *= 0.5,
            }
        }
        if !accepted {
            return Err(Error::NewtonDivergence {
                iters: max_iter,
                residual: norm,
            });
        }
    }
    if norm < 1e-9 {
        Ok(v)
    } else {
        Err(Error::NewtonDivergence {
            iters: max_iter,
            residual: norm,
        })
    }
}

/// A verified-usable normal radius (not a maximal one).
#[derive(Debug, Clone, Copy)]
pub struct NormalRadiusEstimate {
    pub radius: f64,
    /// False when even the smallest tested radius failed the diagnostics.
    pub verified: bool,
}

/// Geometric sweep `rho_0 * 2^-j` over a direction sample; a radius is
/// accepted when `exp` stays in the chart, the Newton log recovers the shot
/// vector and the finite-difference `d exp` stays well-conditioned
/// (condition estimate below 1e6).
pub fn estimate_normal_radius(spray: &Spray, x: &[f64], step: f64) -> Result<NormalRadiusEstimate> {
    let n = spray.base_dim();
    spray.domain().check(x)?;
    let boundary = spray.domain().boundary_distance(x).min(1e3);
    let rho0 = 0.95 * boundary;
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(2 * n + 8);
    for i in 0..n {
        let mut plus = vec![0.0; n];
        plus[i] = 1.0;
        dirs.push(plus.clone());
        plus[i] = -1.0;
        dirs.push(plus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(DIRECTION_SEED);
    for _ in 0..8 {
        let mut d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = d.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-9);
        d.iter_mut().for_each(|c| *c /= norm);
        dirs.push(d);
    }

    let radius_ok = |rho: f64| -> bool {
        for d in &dirs {
            let v: Vec<f64> = d.iter().map(|c| c * rho).collect();
            let Ok(target) = exp_map(spray, x, &v, step) else {
                return false;
            };
            let Ok(recovered) = log_map(spray, x, &target, step, 50) else {
                return false;
            };
            let err: f64 = recovered
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if err > 1e-6 * rho.max(1.0) {
                return false;
            }
            let Ok(jac) = finite_diff_jacobian(|vv: &[f64]| exp_map(spray, x, vv, step), &v, 1e-6)
            else {
                return false;
            };
            let svd = jac.svd(false, false);
            let max_sv = svd.singular_values.max();
            let min_sv = svd.singular_values.min();
            if min_sv <= 0.0 || max_sv / min_sv >= 1e6 {
                return false;
            }
        }
        true
    };

    let mut rho = rho0;
    for _ in 0..=20 {
        if radius_ok(rho) {
            return Ok(NormalRadiusEstimate {
                radius: rho,
                verified: true,
            });
        }
        rho *= 0.5;
    }
    Ok(NormalRadiusEstimate {
        radius: rho,
        verified: false,
    })
}

/// One leg of a piecewise solution.
#[derive(Debug, Clone)]
pub struct PathLeg {
    pub point: Vec<f64>,
    pub velocity: Vec<f64>,
    pub duration: f64,
}

/// A chain of spray legs; each leg must start where the previous one ended
/// (positions continuous, velocities may jump).
#[derive(Debug, Clone)]
pub struct PiecewisePath {
    pub legs: Vec<PathLeg>,
}

impl PiecewisePath {
    pub fn new(legs: Vec<PathLeg>) -> Result<Self> {
        if legs.is_empty() {
            return Err(Error::Invalid(
                "piecewise path needs at least one leg".into(),
            ));
        }
        if legs.iter().any(|l| !(l.duration > 0.0)) {
            return Err(Error::Invalid("leg durations must be positive".into()));
        }
        Ok(PiecewisePath { legs })
    }
}

/// Solve a piecewise path leg by leg and concatenate the dense outputs.
/// The solved endpoint of each leg must match the declared start of the
/// next within 1e-9 (declared knots are authoritative).
pub fn piecewise_solve(spray: &Spray, path: &PiecewisePath, step: f64) -> Result<CurveSolution> {
    let mut total: Option<CurveSolution> = None;
    let mut offset = 0.0;
    for (idx, leg) in path.legs.iter().enumerate() {
        let run = solve_spray(spray, &leg.point, &leg.velocity, (0.0, leg.duration), step)?;
        if let Some(t) = run.exit_time {
            return Err(Error::ChartExit {
                t: offset + t,
                state: run.solution.end_state().to_vec(),
            });
        }
        if idx > 0 {
            let prev_end = total.as_ref().unwrap().end_state();
            let gap: f64 = prev_end[..spray.base_dim()]
                .iter()
                .zip(&leg.point)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if gap > 1e-9 {
                return Err(Error::DiscontinuousPath { knot: idx, gap });
            }
        }
        match &mut total {
            None => total = Some(run.solution),
            Some(acc) => {
                acc.concat(run.solution)?;
            }
        }
        offset += leg.duration;
    }
    Ok(total.expect("at least one leg"))
}
