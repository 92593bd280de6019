use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the segmentation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {dim} expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        dim: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { expected: u32, found: u32 },

    #[error("checkpoint is truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint is malformed: {0}")]
    CheckpointMalformed(String),

    #[error("checkpoint tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint tensor `{0}` is missing")]
    CheckpointMissing(String),

    #[error("dataset error in {}: {msg}", path.display())]
    Dataset { path: PathBuf, msg: String },

    #[error("image error in {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, dim: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::Shape {
            op,
            dim: dim.into(),
            expected,
            found,
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn dataset(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Dataset {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
