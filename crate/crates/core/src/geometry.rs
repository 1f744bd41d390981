//! Shared numeric substrate: chart domains, rectangular grids, symbolic
//! vector fields with Lie brackets, fixed-step RK4 dense-output integration,
//! and the finite-difference / flow-commutator oracles used to independently
//! verify every symbolic formula in the engine.

use std::sync::OnceLock;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::expr::{BoundExpr, ScalarExpr};

/// Padding applied to chart-exit tests so boundary roundoff does not count
/// as leaving the chart.
pub const CHART_PAD: f64 = 1e-9;

/// Default finite-difference step for first derivatives.
pub const FD_STEP: f64 = 1e-5;

/// Default finite-difference step for nested second derivatives.
pub const FD_STEP_SECOND: f64 = 1e-4;

// ---------------------------------------------------------------------------
// Chart domain
// ---------------------------------------------------------------------------

/// An axis-aligned box of per-coordinate closed intervals; the chart domain.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    intervals: Vec<(f64, f64)>,
}

impl BoxDomain {
    pub fn new(intervals: Vec<(f64, f64)>) -> Result<Self> {
        for (i, (lo, hi)) in intervals.iter().enumerate() {
            if !(lo < hi) {
                return Err(Error::Invalid(format!(
                    "box interval {i} is empty or reversed: [{lo}, {hi}]"
                )));
            }
        }
        Ok(BoxDomain { intervals })
    }

    /// The whole of `R^n` (for fields defined everywhere).
    pub fn all(dim: usize) -> Self {
        BoxDomain {
            intervals: vec![(f64::NEG_INFINITY, f64::INFINITY); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.intervals.len()
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    /// Containment with the chart pad; leaving this is a chart exit.
    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.intervals.len()
            && point
                .iter()
                .zip(&self.intervals)
                .all(|(x, (lo, hi))| *x >= lo - CHART_PAD && *x <= hi + CHART_PAD)
    }

    pub fn check(&self, point: &[f64]) -> Result<()> {
        if self.contains(point) {
            Ok(())
        } else {
            Err(Error::OutsideDomain {
                point: point.to_vec(),
            })
        }
    }

    /// Distance from an interior point to the nearest face.
    pub fn boundary_distance(&self, point: &[f64]) -> f64 {
        point
            .iter()
            .zip(&self.intervals)
            .map(|(x, (lo, hi))| (x - lo).min(hi - x))
            .fold(f64::INFINITY, f64::min)
    }

    /// The product box `self x other`.
    pub fn product(&self, other: &BoxDomain) -> BoxDomain {
        let mut intervals = self.intervals.clone();
        intervals.extend_from_slice(&other.intervals);
        BoxDomain { intervals }
    }
}

// ---------------------------------------------------------------------------
// Rectangular sample grids
// ---------------------------------------------------------------------------

/// An axis-aligned rectangular grid with odd point counts, so the center is
/// a grid node and center-anchored values are exact.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    center: Vec<f64>,
    spacing: Vec<f64>,
    half: Vec<usize>,
}

impl GridSpec {
    pub fn new(center: Vec<f64>, spacing: Vec<f64>, points_per_axis: Vec<usize>) -> Result<Self> {
        if center.len() != spacing.len() || center.len() != points_per_axis.len() {
            return Err(Error::Dimension("grid spec length mismatch".into()));
        }
        let mut half = Vec::with_capacity(points_per_axis.len());
        for (axis, &p) in points_per_axis.iter().enumerate() {
            if p % 2 == 0 || p == 0 {
                return Err(Error::Invalid(format!(
                    "grid axis {axis} needs an odd point count, got {p}"
                )));
            }
            if spacing[axis] <= 0.0 {
                return Err(Error::Invalid(format!(
                    "grid axis {axis} needs positive spacing"
                )));
            }
            half.push(p / 2);
        }
        Ok(GridSpec {
            center,
            spacing,
            half,
        })
    }

    /// Uniform grid: `points` per axis (odd) spanning `center +- half_width`.
    pub fn uniform(center: &[f64], half_width: f64, points: usize) -> Result<Self> {
        if points % 2 == 0 || points < 3 {
            return Err(Error::Invalid(format!(
                "uniform grid needs an odd point count >= 3, got {points}"
            )));
        }
        let spacing = half_width / (points / 2) as f64;
        GridSpec::new(
            center.to_vec(),
            vec![spacing; center.len()],
            vec![points; center.len()],
        )
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn points_per_axis(&self) -> Vec<usize> {
        self.half.iter().map(|h| 2 * h + 1).collect()
    }

    pub fn len(&self) -> usize {
        self.half.iter().map(|h| 2 * h + 1).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Signed per-axis offsets (in steps) of a flat index from the center.
    pub fn offsets(&self, flat: usize) -> Vec<isize> {
        let mut rem = flat;
        let mut out = vec![0isize; self.dim()];
        for axis in (0..self.dim()).rev() {
            let n = 2 * self.half[axis] + 1;
            out[axis] = (rem % n) as isize - self.half[axis] as isize;
            rem /= n;
        }
        out
    }

    pub fn flat(&self, offsets: &[isize]) -> Option<usize> {
        let mut flat = 0usize;
        for axis in 0..self.dim() {
            let h = self.half[axis] as isize;
            if offsets[axis] < -h || offsets[axis] > h {
                return None;
            }
            let idx = (offsets[axis] + h) as usize;
            flat = flat * (2 * self.half[axis] + 1) + idx;
        }
        Some(flat)
    }

    /// Coordinates of a grid node, computed as `center + k * spacing` so
    /// shared nodes of nested grids are bit-identical.
    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.offsets(flat)
            .iter()
            .enumerate()
            .map(|(axis, &k)| self.center[axis] + k as f64 * self.spacing[axis])
            .collect()
    }

    pub fn center_flat(&self) -> usize {
        self.flat(&vec![0; self.dim()]).unwrap()
    }

    /// Neighbor of the node at `flat` shifted by `delta` steps along `axis`.
    pub fn neighbor(&self, flat: usize, axis: usize, delta: isize) -> Option<usize> {
        let mut offsets = self.offsets(flat);
        offsets[axis] += delta;
        self.flat(&offsets)
    }

    pub fn iter_points(&self) -> impl Iterator<Item = (usize, Vec<f64>)> + '_ {
        (0..self.len()).map(move |flat| (flat, self.point(flat)))
    }
}

/// Which finite-difference stencil produced a grid derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StencilKind {
    /// Five-point central stencil, O(h^4) truncation.
    CentralFourth,
    /// Three-point central stencil, O(h^2) truncation.
    CentralSecond,
    /// Three-point one-sided stencil at a grid edge, O(h^2) truncation.
    OneSided,
}

/// Derivative along one grid axis from sampled values. `get(k)` returns the
/// value `k` steps away (if that node exists and carries a value). Prefers
/// the five-point central stencil, then central, then one-sided.
pub fn grid_partial(get: impl Fn(isize) -> Option<f64>, h: f64) -> Option<(f64, StencilKind)> {
    if let (Some(m2), Some(m1), Some(p1), Some(p2)) = (get(-2), get(-1), get(1), get(2)) {
        return Some((
            (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h),
            StencilKind::CentralFourth,
        ));
    }
    if let (Some(m1), Some(p1)) = (get(-1), get(1)) {
        return Some(((p1 - m1) / (2.0 * h), StencilKind::CentralSecond));
    }
    let v0 = get(0)?;
    if let (Some(p1), Some(p2)) = (get(1), get(2)) {
        return Some((
            (-3.0 * v0 + 4.0 * p1 - p2) / (2.0 * h),
            StencilKind::OneSided,
        ));
    }
    if let (Some(m1), Some(m2)) = (get(-1), get(-2)) {
        return Some((
            (3.0 * v0 - 4.0 * m1 + m2) / (2.0 * h),
            StencilKind::OneSided,
        ));
    }
    None
}

// ---------------------------------------------------------------------------
// Symbolic vector fields
// ---------------------------------------------------------------------------

/// A vector field on a chart, with one expression per component.
#[derive(Debug, Clone)]
pub struct VectorFieldExpr {
    coords: Vec<String>,
    components: Vec<ScalarExpr>,
    bound: OnceLock<Vec<BoundExpr>>,
}

impl VectorFieldExpr {
    pub fn new(coords: Vec<String>, components: Vec<ScalarExpr>) -> Result<Self> {
        if coords.len() != components.len() {
            return Err(Error::Dimension(format!(
                "vector field has {} components over {} coordinates",
                components.len(),
                coords.len()
            )));
        }
        for (i, comp) in components.iter().enumerate() {
            for v in comp.free_vars() {
                if !coords.contains(&v) {
                    return Err(Error::Dimension(format!(
                        "component {i} uses `{v}` which is not a coordinate"
                    )));
                }
            }
        }
        Ok(VectorFieldExpr {
            coords,
            components,
            bound: OnceLock::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[String] {
        &self.coords
    }

    pub fn components(&self) -> &[ScalarExpr] {
        &self.components
    }

    fn bound(&self) -> &Vec<BoundExpr> {
        self.bound.get_or_init(|| {
            self.components
                .iter()
                .map(|c| c.bind(&self.coords).expect("validated at construction"))
                .collect()
        })
    }

    pub fn eval_into(&self, point: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) -> Result<()> {
        for (slot, bound) in out.iter_mut().zip(self.bound()) {
            *slot = bound.eval_with(point, scratch)?;
        }
        Ok(())
    }

    pub fn eval(&self, point: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        let mut scratch = Vec::new();
        self.eval_into(point, &mut out, &mut scratch)?;
        Ok(out)
    }
}

/// Lie bracket `[V, W]^a = sum_b (V^b d_b W^a - W^b d_b V^a)`, symbolic.
pub fn lie_bracket(v: &VectorFieldExpr, w: &VectorFieldExpr) -> Result<VectorFieldExpr> {
    if v.coords != w.coords {
        return Err(Error::Dimension(
            "lie_bracket needs matching dimensions and coordinates".into(),
        ));
    }
    let n = v.dim();
    let mut components = Vec::with_capacity(n);
    for a in 0..n {
        let mut terms = Vec::with_capacity(2 * n);
        for b in 0..n {
            let dwa = w.components[a].differentiate(&v.coords[b]);
            terms.push(ScalarExpr::mul(&v.components[b], &dwa));
            let dva = v.components[a].differentiate(&v.coords[b]);
            terms.push(ScalarExpr::neg(&ScalarExpr::mul(&w.components[b], &dva)));
        }
        components.push(ScalarExpr::sum(&terms).simplify());
    }
    VectorFieldExpr::new(v.coords.clone(), components)
}

// ---------------------------------------------------------------------------
// Dense ODE output
// ---------------------------------------------------------------------------

/// Dense output of an ODE solve: states and derivatives at breakpoints with
/// cubic Hermite interpolation in between. Piecewise concatenations may
/// carry state jumps at duplicated breakpoints (velocity knots).
#[derive(Debug, Clone)]
pub struct CurveSolution {
    dim: usize,
    ts: Vec<f64>,
    ys: Vec<Vec<f64>>,
    ds: Vec<Vec<f64>>,
}

impl CurveSolution {
    pub fn from_parts(ts: Vec<f64>, ys: Vec<Vec<f64>>, ds: Vec<Vec<f64>>) -> Result<Self> {
        if ts.len() < 2 || ts.len() != ys.len() || ts.len() != ds.len() {
            return Err(Error::Invalid("dense output needs >= 2 breakpoints".into()));
        }
        if ts.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Invalid("breakpoints must be non-decreasing".into()));
        }
        let dim = ys[0].len();
        Ok(CurveSolution { dim, ts, ys, ds })
    }

    /// Constant curve (used for zero-length anchors).
    pub fn constant(t0: f64, t1: f64, state: &[f64]) -> Self {
        CurveSolution {
            dim: state.len(),
            ts: vec![t0, t1],
            ys: vec![state.to_vec(), state.to_vec()],
            ds: vec![vec![0.0; state.len()], vec![0.0; state.len()]],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t_start(&self) -> f64 {
        self.ts[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.ts.last().unwrap()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.ts
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.ys
    }

    /// State at time `t` (cubic Hermite between breakpoints; exact at
    /// breakpoints). At an interior knot the later segment wins.
    pub fn query(&self, t: f64) -> Result<Vec<f64>> {
        Ok(self.sample(t)?.0)
    }

    /// State and time-derivative at `t`.
    pub fn sample(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (t0, t1) = (self.t_start(), self.t_end());
        if t < t0 - 1e-12 || t > t1 + 1e-12 {
            return Err(Error::Invalid(format!(
                "query t = {t} outside solution domain [{t0}, {t1}]"
            )));
        }
        let t = t.clamp(t0, t1);
        // Last index with ts[i] <= t; prefer the later of duplicated knots.
        let mut i = match self
            .ts
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(mut idx) => {
                while idx + 1 < self.ts.len() && self.ts[idx + 1] == t {
                    idx += 1;
                }
                idx
            }
            Err(ins) => ins - 1,
        };
        if i + 1 >= self.ts.len() {
            i = self.ts.len() - 2;
        }
        // Skip zero-length knot segments.
        while self.ts[i + 1] <= self.ts[i] && i + 2 < self.ts.len() {
            i += 1;
        }
        let (ta, tb) = (self.ts[i], self.ts[i + 1]);
        if tb <= ta {
            return Ok((self.ys[i + 1].clone(), self.ds[i + 1].clone()));
        }
        if t == ta {
            return Ok((self.ys[i].clone(), self.ds[i].clone()));
        }
        if t == tb {
            return Ok((self.ys[i + 1].clone(), self.ds[i + 1].clone()));
        }
        let h = tb - ta;
        let s = (t - ta) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let g00 = (6.0 * s2 - 6.0 * s) / h;
        let g10 = 3.0 * s2 - 4.0 * s + 1.0;
        let g01 = (-6.0 * s2 + 6.0 * s) / h;
        let g11 = 3.0 * s2 - 2.0 * s;
        let mut y = vec![0.0; self.dim];
        let mut d = vec![0.0; self.dim];
        for c in 0..self.dim {
            let (ya, yb) = (self.ys[i][c], self.ys[i + 1][c]);
            let (da, db) = (self.ds[i][c], self.ds[i + 1][c]);
            y[c] = h00 * ya + h10 * h * da + h01 * yb + h11 * h * db;
            d[c] = g00 * ya + g10 * da + g01 * yb + g11 * db;
        }
        Ok((y, d))
    }

    pub fn end_state(&self) -> &[f64] {
        self.ys.last().unwrap()
    }

    /// Append another dense solution, shifting its time axis to continue
    /// this one. States may jump at the junction (velocity knots).
    pub fn concat(&mut self, other: CurveSolution) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::Dimension("concat dimension mismatch".into()));
        }
        let shift = self.t_end() - other.t_start();
        self.ts.extend(other.ts.iter().map(|t| t + shift));
        self.ys.extend(other.ys);
        self.ds.extend(other.ds);
        Ok(())
    }
}

/// Outcome of a fixed-step integration that may stop early at a chart exit.
pub(crate) struct RawIntegration {
    pub solution: Option<CurveSolution>,
    pub exit: Option<(f64, Vec<f64>)>,
}

pub(crate) fn integrate_raw<F>(
    mut rhs: F,
    y0: &[f64],
    t_span: (f64, f64),
    step: f64,
) -> Result<RawIntegration>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let (t0, t1) = t_span;
    if !(step > 0.0) {
        return Err(Error::Invalid("step must be positive".into()));
    }
    if t1 <= t0 {
        return Err(Error::Invalid("dense integration needs t1 > t0".into()));
    }
    let span = t1 - t0;
    let n_steps = (span / step).ceil().max(1.0) as usize;
    let h = span / n_steps as f64;
    let dim = y0.len();

    let mut ts = Vec::with_capacity(n_steps + 1);
    let mut ys = Vec::with_capacity(n_steps + 1);
    let mut ds = Vec::with_capacity(n_steps + 1);

    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut stage = vec![0.0; dim];

    if let Err(_e) = rhs(t0, &y, &mut k1) {
        return Ok(RawIntegration {
            solution: None,
            exit: Some((t0, y)),
        });
    }
    ts.push(t0);
    ys.push(y.clone());
    ds.push(k1.clone());

    for i in 0..n_steps {
        let t = t0 + h * i as f64;
        // k1 already holds rhs(t, y) from the previous iteration (FSAL-style
        // bookkeeping for the dense derivative record).
        let exit = |t_at: f64, state: &[f64]| RawIntegration {
            solution: if ts.len() >= 2 {
                Some(CurveSolution {
                    dim,
                    ts: ts.clone(),
                    ys: ys.clone(),
                    ds: ds.clone(),
                })
            } else {
                None
            },
            exit: Some((t_at, state.to_vec())),
        };

        for c in 0..dim {
            stage[c] = y[c] + 0.5 * h * k1[c];
        }
        if rhs(t + 0.5 * h, &stage, &mut k2).is_err() {
            return Ok(exit(t, &y));
        }
        for c in 0..dim {
            stage[c] = y[c] + 0.5 * h * k2[c];
        }
        if rhs(t + 0.5 * h, &stage, &mut k3).is_err() {
            return Ok(exit(t, &y));
        }
        for c in 0..dim {
            stage[c] = y[c] + h * k3[c];
        }
        if rhs(t + h, &stage, &mut k4).is_err() {
            return Ok(exit(t, &y));
        }
        for c in 0..dim {
            y[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        let t_next = if i + 1 == n_steps {
            t1
        } else {
            t0 + h * (i + 1) as f64
        };
        if rhs(t_next, &y, &mut k1).is_err() {
            return Ok(exit(t_next, &y));
        }
        ts.push(t_next);
        ys.push(y.clone());
        ds.push(k1.clone());
    }

    Ok(RawIntegration {
        solution: Some(CurveSolution { dim, ts, ys, ds }),
        exit: None,
    })
}

/// Classical fixed-step RK4 with cubic Hermite dense output.
///
/// The step is shortened to divide the span evenly; a right-hand-side
/// failure (chart exit, domain violation) aborts with the last valid time.
pub fn integrate_ode<F>(rhs: F, y0: &[f64], t_span: (f64, f64), step: f64) -> Result<CurveSolution>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let raw = integrate_raw(rhs, y0, t_span, step)?;
    match raw.exit {
        None => Ok(raw.solution.expect("complete run has a solution")),
        Some((t, state)) => Err(Error::ChartExit { t, state }),
    }
}

/// Endpoint-only RK4 (no dense storage); supports backward time spans.
pub fn integrate_endpoint<F>(
    mut rhs: F,
    y0: &[f64],
    t_span: (f64, f64),
    step: f64,
) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let (t0, t1) = t_span;
    if !(step > 0.0) {
        return Err(Error::Invalid("step must be positive".into()));
    }
    if t0 == t1 {
        return Ok(y0.to_vec());
    }
    let span = t1 - t0;
    let n_steps = (span.abs() / step).ceil().max(1.0) as usize;
    let h = span / n_steps as f64;
    let dim = y0.len();
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut stage = vec![0.0; dim];
    for i in 0..n_steps {
        let t = t0 + h * i as f64;
        let fail = |t: f64, y: &[f64]| Error::ChartExit {
            t,
            state: y.to_vec(),
        };
        rhs(t, &y, &mut k1).map_err(|_| fail(t, &y))?;
        for c in 0..dim {
            stage[c] = y[c] + 0.5 * h * k1[c];
        }
        rhs(t + 0.5 * h, &stage, &mut k2).map_err(|_| fail(t, &y))?;
        for c in 0..dim {
            stage[c] = y[c] + 0.5 * h * k2[c];
        }
        rhs(t + 0.5 * h, &stage, &mut k3).map_err(|_| fail(t, &y))?;
        for c in 0..dim {
            stage[c] = y[c] + h * k3[c];
        }
        rhs(t + h, &stage, &mut k4).map_err(|_| fail(t, &y))?;
        for c in 0..dim {
            y[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

/// Central-difference Jacobian of an `R^p -> R^q` map; entrywise O(h^2).
pub fn finite_diff_jacobian<F>(map: F, point: &[f64], h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(
            "finite-difference step must be positive".into(),
        ));
    }
    let p = point.len();
    let mut plus = point.to_vec();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut q = None;
    for j in 0..p {
        plus[j] = point[j] + h;
        let fp = map(&plus)?;
        plus[j] = point[j] - h;
        let fm = map(&plus)?;
        plus[j] = point[j];
        if fp.len() != fm.len() {
            return Err(Error::Dimension("map output dimension varies".into()));
        }
        q.get_or_insert(fp.len());
        cols.push(
            fp.iter()
                .zip(&fm)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect(),
        );
    }
    let q = q.unwrap_or(0);
    Ok(DMatrix::from_fn(q, p, |r, c| cols[c][r]))
}

/// Flow-commutator oracle for the Lie bracket:
/// `(Phi^W_{-t} o Phi^V_{-t} o Phi^W_t o Phi^V_t (p) - p) / t^2 ~ [V, W](p)`
/// with error O(t). Flows are integrated with 16 RK4 substeps per leg, so
/// integration error is negligible against the O(t) commutator defect.
pub fn flow_commutator_oracle(
    v: &VectorFieldExpr,
    w: &VectorFieldExpr,
    point: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    if v.coords() != w.coords() {
        return Err(Error::Dimension(
            "flow commutator needs matching coordinates".into(),
        ));
    }
    if !(t > 0.0) {
        return Err(Error::Invalid("flow time must be positive".into()));
    }
    let step = t / 16.0;
    let flow = |field: &VectorFieldExpr, from: &[f64], dt: f64| -> Result<Vec<f64>> {
        let mut scratch = Vec::new();
        integrate_endpoint(
            |_t, y: &[f64], dy: &mut [f64]| field.eval_into(y, dy, &mut scratch),
            from,
            (0.0, dt),
            step,
        )
    };
    let a = flow(v, point, t)?;
    let b = flow(w, &a, t)?;
    let c = flow(v, &b, -t)?;
    let d = flow(w, &c, -t)?;
    Ok(d.iter()
        .zip(point)
        .map(|(x, p)| (x - p) / (t * t))
        .collect())
}

/// Max-norm of a slice.
pub fn inf_norm(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Max-norm of a matrix.
pub fn mat_inf_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}
