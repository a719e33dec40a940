use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A shape, channel count, or hyper-parameter does not fit the operation.
    #[error("configuration error: {0}")]
    Config(String),

    /// The library was driven in an order it does not support.
    #[error("usage error: {0}")]
    Usage(String),

    /// A value left the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite values appeared during training or optimization.
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("{path}: parse error at byte {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
