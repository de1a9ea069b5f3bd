use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the checkpoint toolkit.
///
/// Variants are grouped by how the command line reports them: I/O and
/// file-format problems, structural incompatibility between checkpoints,
/// and invalid arguments.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed safetensors data: {0}")]
    Format(String),

    #[error("unsupported dtype tag {0:?}")]
    UnsupportedDtype(String),

    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn incompatible(msg: impl Into<String>) -> Self {
        Error::Incompatible(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code used by the command line for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format(_) | Error::UnsupportedDtype(_) => 2,
            Error::Incompatible(_) => 3,
            Error::InvalidArgument(_) => 4,
        }
    }
}
