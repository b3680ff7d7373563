use std::path::PathBuf;

use thiserror::Error;

use crate::params::ParamStore;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("topology error: {0}")]
    Topology(String),

    #[error("duplicate route {route} ({start} -> {end})")]
    DuplicateRoute { route: usize, start: usize, end: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {stage}: expected {expected}, got {actual}")]
    Shape {
        stage: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged {
        epoch: usize,
        /// Best parameters seen before the divergence, if any epoch completed.
        last_good: Option<Box<ParamStore>>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(stage: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            stage,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
