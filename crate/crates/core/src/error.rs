use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the library.
///
/// The variants double as failure categories for the command-line front end,
/// see [`Error::category`].
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape mismatch, out of
    /// range argument, stepping a finished episode, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The replay buffer does not hold enough data to serve a request yet.
    #[error("replay buffer not ready: {0}")]
    NotReady(String),

    /// An invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A loss or metric became NaN or infinite.
    #[error("non-finite value in {what}: {detail}")]
    NonFinite { what: String, detail: String },

    /// A malformed on-disk artifact (checkpoint, episode file, metrics file).
    #[error("format error in {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Runtime,
    Numerics,
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::NonFinite { .. } => ErrorCategory::Numerics,
            _ => ErrorCategory::Runtime,
        }
    }
}
