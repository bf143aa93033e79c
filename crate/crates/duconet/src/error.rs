//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("foreground is empty (no mask values > 0.5)")]
    EmptyForeground,

    #[error("loss became non-finite at epoch {epoch}, batch of samples {batch_ids:?}")]
    NonFiniteLoss { epoch: usize, batch_ids: Vec<String> },

    #[error("comparison graph is disconnected; components: {components:?}")]
    DisconnectedComparisons { components: Vec<Vec<String>> },

    #[error("item {0:?} has zero wins and zero losses")]
    UnconstrainedItem(String),

    #[error("no comparison records")]
    NoComparisons,

    #[error("bad file format: {0}")]
    BadFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
