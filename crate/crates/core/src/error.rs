use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("invalid shape for {op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown node {0} (graph has {1} nodes)")]
    UnknownNode(usize, usize),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("sampling diverged at step {step}: non-finite state")]
    Diverged { step: usize },
    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: usize, breakdown: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
