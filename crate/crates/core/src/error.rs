use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error at `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label error: {0}")]
    Label(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
