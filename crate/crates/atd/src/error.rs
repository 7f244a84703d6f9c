//! Crate-wide error type.

use thiserror::Error;

/// Everything that can go wrong while building instances or running solvers.
#[derive(Debug, Error)]
pub enum AtdError {
    /// Bad caller input: dimension mismatch, non-finite data, out-of-range
    /// parameters, unusable configuration.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The model subproblem did not reach the requested stationarity.
    #[error("subproblem solve failed after {iterations} iterations (best residual {residual:.3e})")]
    SubsolveFailure { residual: f64, iterations: usize },

    /// The step-size bisection ran out of probes without landing in the
    /// acceptance window.
    #[error("line search failed at iteration {iter}: {reason} (probes: {probes})")]
    LineSearchFailure {
        iter: usize,
        reason: String,
        /// `(theta, zeta)` pairs actually evaluated, for post-mortems.
        probes: String,
    },

    /// An oracle failed its independent consistency checks.
    #[error("oracle validation failed: {0}")]
    ValidationFailure(String),

    /// A runtime certificate was violated while strict mode was on.
    #[error("invariant violation at iteration {iter}: {detail}")]
    InvariantViolation { iter: usize, detail: String },

    /// Slope fits and similar estimators with insufficient or degenerate data.
    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for AtdError {
    fn from(e: serde_json::Error) -> Self {
        AtdError::Serialization(e.to_string())
    }
}

impl From<csv::Error> for AtdError {
    fn from(e: csv::Error) -> Self {
        AtdError::Serialization(e.to_string())
    }
}
