use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("training stopped at epoch cap with accuracy {achieved:.4} < target {target:.4}")]
    TrainingFailure { achieved: f64, target: f64 },
    #[error("cannot decompose query: {0}")]
    Decomposition(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("missing prerequisite artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
