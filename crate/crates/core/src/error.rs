use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A structural setting cannot be honoured (even kernel, C not divisible by 4, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// The API was driven in an unsupported way (e.g. backward from a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),
    /// A loss or activation became NaN or infinite.
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
