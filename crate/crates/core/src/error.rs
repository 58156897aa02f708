use thiserror::Error;

use crate::convert::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64, trajectory: Vec<f64> },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Argument(_) => "argument",
            Error::Config(_) => "config",
            Error::NonFinite(_) => "non_finite",
            Error::OutOfRange(_) => "out_of_range",
            Error::Capacity(_) => "capacity",
            Error::Diverged { .. } => "diverged",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
