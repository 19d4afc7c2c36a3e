//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Process parameters outside the admissible (recurrent) range.
    #[error("invalid process specification: {0}")]
    InvalidSpec(String),

    /// Evaluation requested outside an operation's domain (e.g. a kernel on the diagonal).
    #[error("domain error: {0}")]
    Domain(String),

    /// Adaptive quadrature failed to reach its tolerance.
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    /// A diagonal decay certificate (L, beta) is missing or inconsistent.
    #[error("diagonal certificate rejected: {0}")]
    Certificate(String),

    /// The grid is too coarse to resolve the requested quantity.
    #[error("grid resolution: {0}")]
    Resolution(String),

    /// A documented operation precondition does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Dense linear solve failed (matrix not positive definite, or ill-conditioned).
    #[error("linear solver failed: {0}")]
    Solver(String),

    /// Inverse-power iteration did not stagnate below tolerance.
    #[error("eigenvalue iteration failed: {0}")]
    Eigen(String),

    /// Criticality bisection could not bracket lambda = 1.
    #[error("criticality calibration failed: {0}")]
    Calibration(String),

    /// No admissible ball radius for the localization assumption.
    #[error("localization assumption fails at z = {z}: no admissible radius down to {r_min}")]
    AssumptionA { z: f64, r_min: f64 },

    /// Config file malformed, or a schema/precondition re-check failed at load.
    #[error("config error: {0}")]
    Config(String),

    /// Cache file unreadable or of an unexpected version/shape.
    #[error("cache format error: {0}")]
    CacheFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
