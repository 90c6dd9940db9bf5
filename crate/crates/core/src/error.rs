use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration (invalid shapes, rates, missing keys).
    #[error("config error: {0}")]
    Config(String),

    /// Inputs that violate an operation's contract.
    #[error("validation error: {0}")]
    Validation(String),

    /// Tensor/volume shape disagreement.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Anything that goes wrong mid-run (non-finite loss, corrupt checkpoint, ...).
    #[error("runtime error: {0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
