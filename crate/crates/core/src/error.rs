use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration field holds an unusable value.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Landmark or ROI geometry is degenerate.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Tensor shapes are incompatible for an operator.
    #[error("shape error: {0}")]
    Shape(String),

    /// A metric is undefined for the given input (e.g. a single class).
    #[error("metric error: {0}")]
    Metric(String),

    /// Feature columns do not match a trained model's schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Reverse-mode tape misuse or non-finite values.
    #[error("autodiff error: {0}")]
    Autodiff(String),

    /// A checkpoint or serialized model cannot be loaded.
    #[error("load error: {0}")]
    Load(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
