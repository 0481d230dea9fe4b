use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("duplicate condition id {0} in position index")]
    DuplicateCondition(u8),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sampler state became non-finite at step {step}")]
    SamplerDiverged { step: usize },

    #[error("training diverged at step {step} (loss {loss})")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("lora: {0}")]
    Lora(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("no donor garment available for category {0}")]
    EmptyDonorPool(String),

    #[error("missing inputs for mode {mode}: {missing:?}")]
    MissingInputs { mode: String, missing: Vec<String> },

    #[error("could not parse describer output: {reason}; raw text: {raw:?}")]
    DescriberParse { reason: String, raw: String },

    #[error("zero-norm feature vector for item {0}")]
    ZeroNormFeature(String),

    #[error("service: {0}")]
    Service(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}
