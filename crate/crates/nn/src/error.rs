use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] nucleidiff_core::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values at sampling step t={step}")]
    NonFiniteSample { step: usize },

    #[error("non-finite loss at training step {step} (timesteps {timesteps:?}, batch ids {batch:?})")]
    NonFiniteLoss { step: u64, timesteps: Vec<usize>, batch: Vec<String> },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("configuration does not match the checkpoint being resumed:\n{0}")]
    ConfigMismatch(String),

    #[error("feature extractor weights not found at {path}: {hint}")]
    MissingWeights { path: String, hint: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
