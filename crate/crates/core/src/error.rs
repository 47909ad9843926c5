use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pool has {available} items but {requested} were requested")]
    InsufficientPool { requested: usize, available: usize },

    #[error("length mismatch: {left} predictions vs {right} gold label sets")]
    LengthMismatch { left: usize, right: usize },

    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(usize),

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
