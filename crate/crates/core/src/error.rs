//! Error taxonomy shared by the library and the command-line tool.
//!
//! Variants are grouped by how a caller should react: configuration and
//! parameter errors are caller bugs, format and IO errors are bad inputs,
//! numerical and degeneracy errors are properties of the data that a caller
//! may want to retry with different settings.

use std::path::PathBuf;

use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid parameter `{parameter}`: {reason}")]
    InvalidParameter { parameter: &'static str, reason: String },

    /// A value was outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value or combination is unusable.
    #[error("configuration error: {0}")]
    Config(String),

    /// A factorization or iteration failed beyond recovery.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A point projected at or behind the camera plane.
    #[error("cheirality violation: camera-frame depth {depth} is not positive")]
    Cheirality { depth: f64 },

    /// The constraint set cannot determine a solution.
    #[error("degenerate problem: {0}")]
    Degenerate(String),

    /// A file's contents did not match its declared format.
    #[error("format error in {path}: {reason} (at byte {offset})")]
    Format { path: PathBuf, reason: String, offset: u64 },

    /// An underlying IO operation failed.
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the command-line tool: 1 for usage and
    /// configuration problems, 2 for data and format problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 1,
            Error::InvalidParameter { .. }
            | Error::Domain(_)
            | Error::Degenerate(_)
            | Error::Format { .. }
            | Error::Io { .. } => 2,
            Error::Numerical(_) | Error::Cheirality { .. } => 3,
        }
    }

    /// [`Error::Io`] with the offending path attached.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// [`Error::Format`] with the offending path attached.
    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>, offset: u64) -> Self {
        Error::Format { path: path.into(), reason: reason.into(), offset }
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
