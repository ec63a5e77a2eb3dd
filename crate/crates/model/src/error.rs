use cbff_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("attention over {tokens} tokens exceeds the budget of {limit}; enable allow_large_attention to override")]
    TokenBudget { tokens: usize, limit: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
