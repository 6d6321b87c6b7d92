use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Data(#[from] rtatl_core::Error),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("AU index {index} out of range for {len} AUs")]
    Index { index: usize, len: usize },
    #[error("undefined similarity: indicator column {0} has zero norm")]
    ZeroNorm(usize),
    #[error("label error: {0}")]
    Label(String),
    #[error("non-finite loss at step {step}: {snapshot}")]
    NonFinite { step: usize, snapshot: String },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("checkpoint was trained with config {found}, current config is {expected}")]
    HashMismatch { found: String, expected: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
