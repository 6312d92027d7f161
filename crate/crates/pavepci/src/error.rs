//! Error type shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A model/parameter configuration is internally inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input tensor or value violates an operation's preconditions.
    #[error("input error: {0}")]
    Input(String),

    /// A manifest row failed validation; `row` is 1-based and counts the header.
    #[error("manifest error at row {row}: {message}")]
    Manifest { row: usize, message: String },

    /// A metric is undefined for the given prediction set.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Training aborted (non-finite loss or gradient).
    #[error("training aborted at epoch {epoch}, batch {batch}, lr {lr}: {message}")]
    TrainingAborted {
        epoch: usize,
        batch: usize,
        lr: f64,
        message: String,
    },

    /// A checkpoint file is corrupt or does not match the requested model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// The requested operation is not supported by this model family.
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
