use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("integration error: {0}")]
    Integration(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("solver failure at iteration {iteration}: {reason}")]
    Solver { iteration: usize, reason: String },
    #[error("policy search failed: {0}")]
    Search(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unsupported model format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
