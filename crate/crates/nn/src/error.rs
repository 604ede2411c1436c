use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("tensor `{0}` missing from archive")]
    MissingTensor(String),
    #[error("archive {path}: {reason}")]
    Archive { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
