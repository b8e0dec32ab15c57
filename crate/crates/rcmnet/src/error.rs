use std::path::PathBuf;

/// Crate-wide error type. The `category` string is what the CLI prints as the
/// machine-parsable error class.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non-finite",
            Error::Format(_) => "format",
            Error::Checkpoint(_) => "checkpoint",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
