use std::path::PathBuf;

use thiserror::Error;

use crate::detector::Stage;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot place shape: {0}")]
    Placement(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("class `{class}` has {available} instances in the pool, {requested} requested")]
    InsufficientInstances {
        class: String,
        available: usize,
        requested: usize,
    },

    #[error("annotation {annotation_id}: {reason}")]
    CocoAnnotation { annotation_id: u64, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("operation requires stage `{expected}`, checkpoint is `{found}`")]
    Stage { expected: Stage, found: Stage },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("target label {label} out of range for {ways}-way logits")]
    Label { label: usize, ways: usize },

    #[error("non-finite {component} loss ({value})")]
    NonFiniteLoss { component: &'static str, value: f64 },

    #[error("data contract violation: {0}")]
    DataContract(String),

    #[error("freeze violation: gradient produced for frozen tensor `{0}`")]
    FrozenUpdate(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
