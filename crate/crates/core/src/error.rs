use std::path::PathBuf;

use lamae_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LamaeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("malformed ICD-10 code {0:?}")]
    IcdParse(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("models diverge at {tensor}: {detail}")]
    Equivalence { tensor: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl LamaeError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LamaeError::Config(_) => 2,
            LamaeError::Data(_) | LamaeError::IcdParse(_) | LamaeError::Checkpoint(_) | LamaeError::Io { .. } => 3,
            LamaeError::Numeric(_) => 4,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LamaeError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, LamaeError>;
