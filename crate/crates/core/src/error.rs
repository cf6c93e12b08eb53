use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("class index {value} out of range for {n_classes} classes")]
    ClassOutOfRange { value: usize, n_classes: usize },
    #[error("malformed {kind} data: {msg}")]
    Format { kind: &'static str, msg: String },
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn format_err(kind: &'static str, msg: impl Into<String>) -> Error {
    Error::Format { kind, msg: msg.into() }
}
