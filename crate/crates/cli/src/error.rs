use std::path::PathBuf;

use mixlab_core::MixError;
use thiserror::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    /// A check ran to completion and did not hold.
    #[error("check failed: {0}")]
    Failed(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot read {path}: {message}")]
    Input { path: PathBuf, message: String },

    #[error(transparent)]
    Core(MixError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failed(_) => EXIT_FAILURE,
            CliError::Io { .. } | CliError::Input { .. } => EXIT_IO,
            CliError::Core(MixError::Io { .. }) => EXIT_IO,
            CliError::Core(_) => EXIT_FAILURE,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

impl From<MixError> for CliError {
    fn from(e: MixError) -> Self {
        CliError::Core(e)
    }
}
