use thiserror::Error;

#[derive(Debug, Error)]
pub enum PathError {
    #[error("dimension mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid gate value {value}: must lie in (0, 1)")]
    InvalidGate { value: f64 },
    #[error("invalid beta value {value}: must lie in (0, 2)")]
    InvalidBeta { value: f64 },
    #[error("direction row {row} has norm {norm}: rows must be unit-norm or zero")]
    InvalidDirection { row: usize, norm: f64 },
    #[error("gate mismatch: {0}")]
    GateMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed token sequence: {0}")]
    MalformedSequence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PathError>;
