use thiserror::Error;

/// Errors raised by the solvers, the training loops and the I/O helpers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The forward state left the representable range. Usually means the
    /// product `M_A * T` is too large for the chosen grid.
    #[error("non-finite state at t = {time} (member {member})")]
    NonFiniteState { member: usize, time: f64 },

    #[error("non-finite adjoint at t = {time} (member {member})")]
    NonFiniteAdjoint { member: usize, time: f64 },

    #[error("non-finite variational solution at t = {time}")]
    NonFiniteVariational { time: f64 },

    #[error("inner maximization did not converge at node {node}: residual {residual:e} after {iterations} steps")]
    InnerNotConverged {
        node: usize,
        residual: f64,
        iterations: usize,
    },

    #[error("descent inequality violated at iteration {k}: J(k+1) - J(k) = {lhs:e} > {rhs:e}")]
    DescentViolated { k: usize, lhs: f64, rhs: f64 },

    #[error("readout matrix is rank deficient (smallest singular value {sigma_min:e})")]
    RankDeficientReadout { sigma_min: f64 },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
