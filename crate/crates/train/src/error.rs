use std::path::PathBuf;

use cbff_core::CoreError;
use cbff_data::DataError;
use cbff_model::ModelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite {what} at epoch {epoch}, iteration {iter}")]
    NonFinite { what: String, epoch: usize, iter: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("metrics log: {0}")]
    Csv(#[from] csv::Error),
}

impl TrainError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by NaN or infinite values during training.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Self::NonFinite { .. })
    }

    /// True for unreadable or inconsistent checkpoint files.
    pub fn is_corrupt_artifact(&self) -> bool {
        matches!(self, Self::Model(ModelError::Checkpoint(_)))
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;
