use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{}: parse error at byte {offset}: {message}", file.display())]
    Parse {
        file: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("scene spec error: {0}")]
    Spec(String),

    #[error("backend {backend}: {message}")]
    Backend { backend: String, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("categorization error: {0}")]
    Categorization(String),

    #[error("control list parse error: {0}")]
    ControlParse(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("training diverged at step {step} (lr {lr}, batch {batch:?}): {message}")]
    Diverged {
        step: usize,
        lr: f64,
        batch: Vec<String>,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("contract violation: {0}")]
    Contract(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
