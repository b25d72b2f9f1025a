use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the domain of the operation (non-positive gamma
    /// argument, empty vector, non-finite statistic, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A confusion-matrix column with zero mass, so `p(out | k)` is undefined.
    #[error("confusion column {column} has zero total count and no smoothing")]
    DegenerateColumn { column: usize },

    #[error("class {class} never occurs in the calibration counts")]
    DegenerateClass { class: usize },

    /// Every calibration element belongs to `class`, so there is no
    /// complement statistic for it.
    #[error("no elements outside class {class}; complement statistic is empty")]
    EmptyComplement { class: usize },

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("{path}: format error: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
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
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
