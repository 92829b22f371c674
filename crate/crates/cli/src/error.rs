use std::path::PathBuf;

use itfa_core::detector::{ClassifierMode, RegressorMode};
use thiserror::Error;

use crate::audit::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] itfa_core::Error),

    #[error("experiment configuration: {0}")]
    Config(String),

    #[error("no base checkpoint for classifier `{classifier}` with regressor `{regressor}`")]
    MissingBase {
        classifier: ClassifierMode,
        regressor: RegressorMode,
    },

    #[error("training diverged at step {step}; last good checkpoint kept at {}", checkpoint.display())]
    Diverged {
        step: usize,
        checkpoint: PathBuf,
        #[source]
        source: itfa_core::Error,
    },

    #[error("{} invariant audit violation(s): {}", .0.len(), summarize(.0))]
    Audit(Vec<Violation>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

fn summarize(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: audit failures are distinguished from ordinary errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Audit(_) => 3,
            Error::Config(_) | Error::Toml { .. } => 2,
            _ => 1,
        }
    }
}
