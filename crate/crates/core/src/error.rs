//! Crate-wide error type. Every variant maps onto one of three process exit
//! categories so a command-line front end can report failures uniformly.

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::dump::DumpError;
use crate::tensor::TensorError;

/// Exit category of an [`Error`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// The configuration is invalid.
    Config,
    /// A computation produced non-finite or degenerate values.
    Numeric,
    /// A file could not be read or written, or its contents are malformed.
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Numeric => 3,
            ErrorKind::Io => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("degenerate {metric}: {detail}")]
    Degenerate { metric: &'static str, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: invalid `{field}`: {detail}")]
    Format {
        path: PathBuf,
        field: String,
        detail: String,
    },
    #[error("invalid argument `{field}`: {detail}")]
    Argument { field: String, detail: String },
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } => ErrorKind::Config,
            Error::Numeric(_) | Error::Degenerate { .. } => ErrorKind::Numeric,
            Error::Tensor(TensorError::NonFinite { .. }) => ErrorKind::Numeric,
            Error::Tensor(TensorError::ReplayMismatch { .. }) => ErrorKind::Numeric,
            Error::Argument { .. } => ErrorKind::Config,
            Error::Io { .. } | Error::Format { .. } | Error::Dump(_) | Error::Tensor(_) => ErrorKind::Io,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind().exit_code()
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_map_to_exit_codes() {
        assert_eq!(Error::config("train.batch_size", "must be positive").exit_code(), 2);
        assert_eq!(Error::Numeric("loss is NaN".into()).exit_code(), 3);
        assert_eq!(Error::Tensor(TensorError::NonFinite { op: "sigmoid" }).exit_code(), 3);
        assert_eq!(Error::format("meta.json", "p", "mismatch").exit_code(), 4);
        let msg = Error::config("train.batch_size", "must be positive").to_string();
        assert!(msg.contains("batch_size"));
    }
}
