//! Accelerated Taylor descent: momentum-accelerated minimization of smooth
//! convex functions using p-th order Taylor expansions (p = 1, 2, 3), with
//! runtime certificates, invariant checking, reference baselines, and a
//! benchmark harness.
//!
//! The crate is organized around six pieces:
//!
//! * [`oracle`]: problem instances exposing Taylor-expansion data through
//!   directional applicators, plus seeded instance families and an
//!   independent finite-difference validator.
//! * [`subsolver`]: the regularized model subproblem
//!   `min_z f_p(center + z) + (L_p / p!) ||z||^(p+1)`, solved in closed form
//!   (p = 1), by a secular-equation root find (p = 2), or by damped Newton
//!   (p = 3).
//! * [`engine`]: the accelerated outer loop, its potential-function
//!   bookkeeping, and per-iteration invariant checks.
//! * [`line_search`]: the bisection that places each step size inside the
//!   acceptance window required by the convergence analysis.
//! * [`baselines`]: gradient descent, accelerated gradient descent, and the
//!   unaccelerated higher-order method, emitting the same trace schema.
//! * [`bench`]: run matrices, CSV/JSON trace output, and log-log slope fits.

pub mod baselines;
pub mod bench;
pub mod engine;
pub mod error;
pub mod line_search;
pub mod oracle;
pub mod subsolver;

pub use error::AtdError;
pub use oracle::{Point, ProblemInstance, ProblemOracle};

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, AtdError>;
