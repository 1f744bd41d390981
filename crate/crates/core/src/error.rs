use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },

    #[error("exponent must be an integer literal at offset {offset}")]
    NonIntegerExponent { offset: usize },

    #[error("unbound variable `{0}` during evaluation")]
    UnboundVariable(String),

    #[error("domain violation: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("point {point:?} is outside the chart domain")]
    OutsideDomain { point: Vec<f64> },

    #[error("trajectory left the chart at t = {t} (last valid state {state:?})")]
    ChartExit { t: f64, state: Vec<f64> },

    #[error("expression budget exceeded; deepest completed order is {completed_order}")]
    ExpressionBudget { completed_order: usize },

    #[error(
        "Newton iteration did not converge within {iters} iterations (residual {residual:.3e})"
    )]
    NewtonDivergence { iters: usize, residual: f64 },

    #[error("singular Jacobian encountered: {0}")]
    SingularJacobian(String),

    #[error("connection is not a tangent-bundle connection (fiber rank {fiber_rank} != base dim {base_dim})")]
    NotTangent { fiber_rank: usize, base_dim: usize },

    #[error("connection is not symmetric: max torsion magnitude {residual:.3e} at {point:?}")]
    NotSymmetric { residual: f64, point: Vec<f64> },

    #[error("spray homogeneity violated: |acc(x, a v) - a^2 acc(x, v)| = {residual:.3e} at scale a = {scale}")]
    NotHomogeneous { residual: f64, scale: f64 },

    #[error("piecewise path discontinuous at knot {knot}: gap {gap:.3e}")]
    DiscontinuousPath { knot: usize, gap: f64 },

    #[error("metric seed is degenerate or asymmetric: {0}")]
    BadMetricSeed(String),

    #[error("antisymmetry hypothesis failed (residual {residual:.3e} > tol {tol:.3e}); pass Override to force recovery")]
    HypothesisFailed { residual: f64, tol: f64 },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
