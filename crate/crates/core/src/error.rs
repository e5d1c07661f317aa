use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
    #[error("config error: {0}")]
    Config(String),
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error in `{field}`: {msg}")]
    Validation { field: String, msg: String },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("parameter registry: {0}")]
    Registry(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn contract(msg: impl Into<String>) -> CoreError {
    CoreError::Contract(msg.into())
}
