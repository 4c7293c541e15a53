use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch { op: &'static str, left: String, right: String },

    #[error("backward called before forward on {0}")]
    BackwardBeforeForward(&'static str),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step} in term {term}")]
    NonFiniteLoss { step: usize, term: String },

    #[error("step {step} outside schedule range [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },

    #[error("class {0} is not present in the image labels")]
    ClassAbsent(usize),

    #[error("image has no positive label")]
    NoPositiveLabel,

    #[error("cannot average an empty list of agent score tables")]
    EmptyAgentList,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: field `{field}`: {message}")]
    Parse { path: PathBuf, line: usize, field: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
