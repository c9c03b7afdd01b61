use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input contract violated: {0}")]
    InputContract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
