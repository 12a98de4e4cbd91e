use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} is outside [0, 1]")]
    TimeOutOfRange { t: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{op} is not supported for {what}")]
    Unsupported { op: &'static str, what: String },

    #[error("matrix is not symmetric positive-definite")]
    NotSpd,

    #[error("empty batch")]
    EmptyBatch,

    #[error("time grid needs at least two points")]
    EmptyGrid,

    #[error("non-finite state in trajectory {index} at t = {t}")]
    NonFiniteState { index: usize, t: f64 },

    #[error("non-finite divergence estimate in trajectory {index} at t = {t}")]
    DivergenceFailure { index: usize, t: f64 },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("field and reference are defined against different processes")]
    ProcessMismatch,

    #[error("checkpoint {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<R> = std::result::Result<R, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
