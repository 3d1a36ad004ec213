use thiserror::Error;

#[derive(Debug, Error)]
pub enum EscError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("missing gradient for parameter {0}")]
    MissingGradient(usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },
    #[error("invalid permutation: {0}")]
    Permutation(String),
    #[error("parameter target {target} unreachable; nearest count {nearest}")]
    Unreachable { target: usize, nearest: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = EscError> = std::result::Result<T, E>;
