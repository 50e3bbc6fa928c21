//! Quotient gradient system solver.
//!
//! A constraint satisfaction problem `C_I(y) < 0, C_E(y) = 0` is rewritten as
//! the least-squares problem `min ½‖h(x)‖²` over `x = (y, s)` with slack
//! variables `s`. The gradient flow `ẋ = −D h(x)ᵀ h(x)` is integrated to its
//! stable equilibria (local minima); reverse-time integration moves a state
//! out of one stability region so the next forward run can find another.

mod integrate;
mod settings;
mod solver;
mod stability;
mod system;
pub mod testing;

use thiserror::Error;

pub use settings::QgsSettings;
pub use solver::{
    attempt_rng, enumerate_minima, escape, integrate_backward, integrate_forward,
    integrate_forward_observed, Equilibrium, MinimaSet, MINIMA_SCHEMA_VERSION,
};
pub use stability::{analyze, field_jacobian_fd, Stability, StabilityTag, DENSE_STABILITY_LIMIT};
pub use system::{add_slack, cost, field, ConstraintSystem, FnMap, ResidualMap, SlackLink};

#[derive(Debug, Error)]
pub enum QgsError {
    #[error("constraint problem has no inequality or equality rows")]
    EmptyProblem,
    #[error("invalid constraint system: {0}")]
    InvalidSystem(String),
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("residual component {index} is not finite")]
    NonFiniteResidual { index: usize },
    #[error("gradient component {index} is not finite")]
    NonFiniteGradient { index: usize },
    #[error("no equilibrium within the integration budget (best cost {:.3e}, ‖∇f‖ {:.3e})", .0.cost, .0.grad_norm)]
    NoConvergence(Box<Equilibrium>),
    #[error("trajectory diverged")]
    NumericalBlowup,
    #[error("no forward integration converged after {attempts} attempts{}", .last.as_ref().map(|l| format!(" (last: {l})")).unwrap_or_default())]
    NoMinimaFound {
        attempts: usize,
        last: Option<String>,
    },
}
