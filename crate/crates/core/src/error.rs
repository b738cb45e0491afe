use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by every layer of the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("data error in record `{id}`: {reason}")]
    Data { id: String, reason: String },
    #[error("data error: {0}")]
    Dataset(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("version error: {0}")]
    Version(String),
    #[error("metric error: {0}")]
    Metric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Data {
            id: id.into(),
            reason: reason.into(),
        }
    }

    /// Stable machine-readable category, used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IoError",
            Error::Format(_) => "FormatError",
            Error::Data { .. } | Error::Dataset(_) => "DataError",
            Error::Config(_) => "ConfigError",
            Error::Numeric(_) => "NumericError",
            Error::Shape { .. } => "ShapeError",
            Error::Version(_) => "VersionError",
            Error::Metric(_) => "MetricError",
        }
    }
}
