use thiserror::Error;

/// Errors raised by the robust-learning primitives.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),

    #[error("invalid loss specification: {0}")]
    InvalidSpec(String),

    #[error("class index {label} out of range for K = {k}")]
    LabelOutOfRange { label: usize, k: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("Lagrange multiplier must be nonnegative, got {0}")]
    NegativeGamma(f64),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("unsupported transform: {0}")]
    UnsupportedTransform(&'static str),

    #[error("invalid threshold {0}: must exceed 1")]
    InvalidThreshold(f64),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Schema { path: String, line: u64, msg: String },

    #[error("model checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
