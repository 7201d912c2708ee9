use std::path::PathBuf;

/// Errors produced anywhere in the adaptation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("forward cache does not belong to the current model parameters")]
    StaleCache,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, found: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            found,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
