use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
///
/// [`Error::kind`] maps each variant onto one of the coarse categories used
/// for process exit codes by the command-line front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("mask has no foreground pixels")]
    NoForeground,

    #[error("memory bank is empty")]
    NoMemory,

    #[error("cannot build a prompt for seed frame {frame}: {reason}")]
    Seed { frame: usize, reason: String },

    #[error("{path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("dataset validation failed: {0}")]
    Validation(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error category, used for exit codes and the `ERROR <code>:` prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn code(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::Numeric(_) => ErrorKind::Numeric,
            Error::Shape(_)
            | Error::NoForeground
            | Error::NoMemory
            | Error::Seed { .. }
            | Error::Load { .. }
            | Error::Validation(_)
            | Error::Checkpoint(_)
            | Error::Io { .. } => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load { path: path.into(), reason: reason.into() }
    }
}
