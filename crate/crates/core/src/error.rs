use std::path::PathBuf;

use crate::training::TrainTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid class counts: {0}")]
    InvalidCounts(String),

    #[error("degenerate counts: class {class} holds every sample")]
    DegenerateCounts { class: usize },

    #[error("label {label} out of range for {k} classes")]
    LabelOutOfRange { label: usize, k: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no samples for class {0}")]
    NoSamplesForClass(usize),

    #[error("B too small for margin: log2(4B/gamma) = {log2_ratio} <= 1 for class {class}")]
    BoundTooSmall { class: usize, log2_ratio: f64 },

    #[error("zero-sum denominator in posterior conversion")]
    ZeroSum,

    #[error("diverged at epoch {epoch}, batch {batch}")]
    Diverged {
        epoch: usize,
        batch: usize,
        partial: Box<TrainTrace>,
    },

    #[error("linear model has no backbone to freeze; pass allow_linear to retrain it anyway")]
    NoBackbone,

    #[error("{path}: row {row}: {msg}")]
    Csv {
        path: PathBuf,
        row: usize,
        msg: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
