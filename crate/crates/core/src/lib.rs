//! Chart-level computational engine for integrability of distributions and
//! connection geometry: Levi forms, single-leaf total-differential-equation
//! solving by horizontal lifting, curvature/torsion and iterated covariant
//! derivatives, semi-Riemannian metric recovery from symmetric connections,
//! and local affine (Cartan-Ambrose-Hicks) map synthesis.
//!
//! Everything operates on a single chart: an open box in `R^n` with fields
//! given as symbolic expressions. Every symbolic formula in the engine is
//! cross-checkable against an independent numeric oracle (finite differences,
//! flow commutators, dense ODE solutions).

pub mod cah;
pub mod connection;
pub mod distribution;
pub mod error;
pub mod expr;
pub mod fixtures;
pub mod geometry;
pub mod metric;
pub mod spray;

pub(crate) mod parallel;

pub use error::{Error, Result};
pub use expr::{parse_expr, BoundExpr, ScalarExpr, UnaryFn};
