use std::path::PathBuf;

use fcdx_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: format error at byte {offset}: {msg}", path.display())]
    Format { path: PathBuf, offset: u64, msg: String },

    #[error("argument error: {0}")]
    Argument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest references missing files for: {}", ids.join(", "))]
    Validation { ids: Vec<String> },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), offset, msg: msg.into() }
    }

    /// Process exit code for the command line: 3 for I/O, 4 for everything
    /// that is wrong with the data, config or file contents.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Tensor(TensorError::Io(_)) => 3,
            _ => 4,
        }
    }
}
