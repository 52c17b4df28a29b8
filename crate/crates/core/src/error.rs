use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure categories shared by every module.
///
/// [`Error::category`] yields a short stable token that the CLI prints so
/// scripts can match on the failure kind.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("ill-conditioned moment matrix (condition estimate {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("solution blew up at t = {t}: max |u| = {max_abs:.3e}")]
    BlowUp { t: f64, max_abs: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{what} at byte offset {offset}: {reason}")]
    Format {
        what: &'static str,
        offset: u64,
        reason: String,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn non_finite(msg: impl Into<String>) -> Self {
        Error::NonFinite(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape-mismatch",
            Error::NonFinite(_) | Error::BlowUp { .. } => "numeric",
            Error::IllConditioned { .. } => "ill-conditioned",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
        }
    }

    /// Process exit code: 2 config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::NonFinite(_) | Error::BlowUp { .. } | Error::IllConditioned { .. } => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
        }
    }
}
