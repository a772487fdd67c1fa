use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("shape error in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A caller violated an API precondition (non-scalar loss, index out of
    /// range, label out of range, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite or otherwise numerically invalid value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Dataset ingestion / layout problems.
    #[error("data error: {0}")]
    Data(String),

    /// Obstacle placement cannot satisfy the compositing contract.
    #[error("placement error: {0}")]
    Placement(String),

    /// Checkpoint container is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
