use thiserror::Error;

/// Errors raised by the integrators and solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("time {t} outside trajectory domain [{lower}, {upper}]")]
    OutOfDomain { t: f64, lower: f64, upper: f64 },

    #[error("integration diverged (non-finite state) at t = {time}")]
    Divergence { time: f64 },

    #[error("delay {delay} is positive but shorter than the step {step}; the grid must be aligned to the delay")]
    DelayBelowStep { delay: f64, step: f64 },

    #[error("no grid with step near {base_h} makes both T = {horizon} and tau = {delay} integer multiples of the step")]
    GridAlignment {
        horizon: f64,
        delay: f64,
        base_h: f64,
    },

    #[error("a guess adjoint trajectory is required when tau = {tau} > 0")]
    MissingGuess { tau: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("singular shooting Jacobian (pivot {pivot:e} below {threshold:e})")]
    SingularJacobian { pivot: f64, threshold: f64 },
}

pub type Result<T, E = SolverError> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> SolverError {
    SolverError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
