use std::path::PathBuf;
use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {what} (index {index})")]
    Numeric { what: String, index: usize },

    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}")]
    NumericAbort { epoch: usize, batch: usize },

    #[error("degenerate pose: {0}")]
    DegeneratePose(String),

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("provenance error: {0}")]
    Provenance(String),

    #[error("{path}:{line}: parse error: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric abort, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Fusion(_) => 2,
            Error::Parse { .. }
            | Error::Dimension(_)
            | Error::Provenance(_)
            | Error::Checkpoint(_)
            | Error::DegeneratePose(_)
            | Error::Io { .. } => 3,
            Error::NumericAbort { .. } | Error::Numeric { .. } => 4,
            Error::Tensor(TensorError::Numeric { .. }) => 4,
            Error::Tensor(_) | Error::Domain(_) => 1,
        }
    }
}
