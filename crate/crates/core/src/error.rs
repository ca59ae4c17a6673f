use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown centroid id {0}")]
    UnknownId(u64),

    #[error("duplicate id {0}")]
    DuplicateId(u64),

    #[error("a cache update is already in flight")]
    UpdateInFlight,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error("http: {0}")]
    Http(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
