use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value outside its admissible range (e.g. a raw rating outside [1, 5]).
    #[error("{0}")]
    Domain(String),
    #[error("{0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dataset is empty after filtering ({dropped} records dropped)")]
    EmptyDataset { dropped: usize },
    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("{0}")]
    Retrieval(String),
    #[error("duplicate nodule id `{0}`")]
    Duplicate(String),
    #[error("unknown nodule id `{0}`")]
    Lookup(String),
    #[error("{0}")]
    Protocol(String),
    #[error("{0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable, machine-parsable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Argument(_) => "argument",
            Error::Shape(_) => "shape",
            Error::EmptyDataset { .. } => "empty-dataset",
            Error::Divergence { .. } => "divergence",
            Error::Retrieval(_) => "retrieval",
            Error::Duplicate(_) => "duplicate",
            Error::Lookup(_) => "lookup",
            Error::Protocol(_) => "protocol",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
