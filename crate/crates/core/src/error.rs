use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("matrix is rank deficient (column {column} has norm {norm:e})")]
    RankDeficient { column: usize, norm: f64 },
    #[error("diagonal entry {index} is not strictly positive ({value})")]
    InvalidDiagonal { index: usize, value: f64 },
    #[error("window of {window} samples does not fit a trial of {trial} samples")]
    WindowTooLong { window: usize, trial: usize },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },
    #[error("ODE integration produced a non-finite state at step {step}")]
    OdeDiverged { step: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
