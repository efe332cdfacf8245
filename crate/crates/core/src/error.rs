use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = OncoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum OncoError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid phantom spec: {0}")]
    Spec(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl OncoError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OncoError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        OncoError::Format {
            field: field.into(),
            message: message.into(),
        }
    }
}
