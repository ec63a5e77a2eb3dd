use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("metrics error: {0}")]
    Metrics(String),
    #[error("gradient oracle failure: {0}")]
    Oracle(String),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
