use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the ensemble pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or lengths that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A call that violates an API precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed record, checkpoint or report file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A strategy that cannot be applied to the requested task.
    #[error("not applicable: {0}")]
    NotApplicable(String),

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss at {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn not_applicable(msg: impl Into<String>) -> Self {
        Error::NotApplicable(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier for the error class, used by the CLI.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Usage(_) => "usage",
            Error::Parse { .. } => "parse",
            Error::NotApplicable(_) => "not_applicable",
            Error::NonFinite(_) => "non_finite",
            Error::Io { .. } => "io",
        }
    }
}
