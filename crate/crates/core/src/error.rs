//! Crate-wide error type.

use std::path::PathBuf;

use crate::episode::ViewRole;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest error at {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("view {0} not present in episode")]
    MissingView(ViewRole),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no anchor frame found for query {query:?} on view {view}")]
    AnchorNotFound { view: ViewRole, query: String },

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("identity pool is empty")]
    EmptyPool,

    #[error("packing failed: {0}")]
    Packing(String),

    #[error("resolution budget exceeded: {0}")]
    Budget(String),

    #[error("client backend {backend}: {message}")]
    Client { backend: String, message: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("stage {stage} has no completion manifest; run it first")]
    MissingStage { stage: String },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn manifest(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Manifest {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn client(backend: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Client {
            backend: backend.into(),
            message: message.into(),
        }
    }
}
