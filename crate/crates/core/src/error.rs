//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TgmnError>;

#[derive(Debug, Error)]
pub enum TgmnError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("format error in {path}: line {line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },

    #[error("shape mismatch for `{field}`: expected {expected}, found {found}")]
    Shape {
        field: String,
        expected: String,
        found: String,
    },

    #[error("missing input vectors for node ids {0:?}")]
    MissingVectors(Vec<usize>),

    #[error("unknown question id {0}")]
    UnknownQuestion(usize),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("non-finite training loss at epoch {epoch}; batch students {students:?}")]
    NonFiniteLoss { epoch: usize, students: Vec<u64> },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint version mismatch: file has version {found}, reader supports {expected}")]
    Version { expected: u32, found: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl TgmnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TgmnError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, line: usize, message: impl Into<String>) -> Self {
        TgmnError::Format {
            path: path.as_ref().display().to_string(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn shape(field: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        TgmnError::Shape {
            field: field.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
