//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("dataset `{name}` has an empty {split} split")]
    EmptySplit { name: String, split: String },

    #[error("corrupt dataset file {path}: {reason}")]
    CorruptData { path: String, reason: String },

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("{what} must be in {range}, got {value}")]
    OutOfRange {
        what: String,
        range: String,
        value: f64,
    },

    #[error("invalid class label {label} for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("class count mismatch: model has {model} classes, data has {data}")]
    ClassMismatch { model: usize, data: usize },

    #[error("invalid exit locations: {0}")]
    InvalidLocations(String),

    #[error("no internal classifier at location {0}")]
    MissingIc(usize),

    #[error("partition cut {cut} has no edge-side internal classifier")]
    CutWithoutIc { cut: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("insufficient data: need at least {need} items, got {got}")]
    InsufficientData { need: usize, got: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape_mismatch(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn out_of_range(what: impl Into<String>, range: impl Into<String>, value: f64) -> Self {
        Error::OutOfRange {
            what: what.into(),
            range: range.into(),
            value,
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
