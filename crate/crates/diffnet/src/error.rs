use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("non-finite value produced by layer {layer}")]
    NonFinite { layer: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(expected: impl ToString, got: impl ToString) -> NetError {
    NetError::Shape {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
