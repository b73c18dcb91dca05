use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by mixer construction, application, and serialization.
#[derive(Debug, Error)]
pub enum MixError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("numeric range error: {0}")]
    NumericRange(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index out of range: {index} (length {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("singular value decomposition did not converge")]
    SvdNonConvergence,

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed weight container: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, MixError>;

impl MixError {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        MixError::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MixError::Io {
            path: path.into(),
            source,
        }
    }
}
