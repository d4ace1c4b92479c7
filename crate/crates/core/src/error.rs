use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("box ({x_min}, {y_min}, {x_max}, {y_max}) lies outside the {width}x{height} image")]
    EmptyBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        width: f64,
        height: f64,
    },

    #[error("keypoints have no visible joint")]
    NoVisibleJoints,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("input of size {height}x{width} is not a multiple of the backbone stride {stride}")]
    Shape {
        height: usize,
        width: usize,
        stride: usize,
    },

    #[error("logits contain non-finite values")]
    NonFiniteLogits,

    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("score table is empty")]
    EmptyTable,

    #[error("class count mismatch: {left} vs {right}")]
    ClassCountMismatch { left: usize, right: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: image {image} cannot be read: {reason}")]
    MissingImage {
        path: String,
        line: usize,
        image: String,
        reason: String,
    },

    #[error("{path}:{line}: label {label:?} is not in the label space")]
    UnknownLabel {
        path: String,
        line: usize,
        label: String,
    },

    #[error("{path}:{line}: training record {image} has neither boxes nor keypoints")]
    MissingPersonEvidence {
        path: String,
        line: usize,
        image: String,
    },

    #[error("split {0} has no samples")]
    EmptySplit(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (batch sample indices {indices:?})")]
    NonFiniteLoss { step: u64, indices: Vec<usize> },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn mismatch(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::DimensionMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
