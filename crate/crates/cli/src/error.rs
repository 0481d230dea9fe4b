use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config files or settings.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] tryon_core::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    /// Short error class printed before the message.
    pub fn class(&self) -> &'static str {
        use tryon_core::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => match e {
                E::InvalidArgument(_) => "invalid-argument",
                E::Shape(_) | E::DuplicateCondition(_) => "shape",
                E::NonFinite(_) | E::SamplerDiverged { .. } | E::TrainingDiverged { .. } => "diverged",
                E::Lora(_) => "lora",
                E::Checkpoint(_) => "checkpoint",
                E::EmptyDonorPool(_) => "empty-donor-pool",
                E::MissingInputs { .. } => "missing-inputs",
                E::DescriberParse { .. } | E::ZeroNormFeature(_) | E::Service(_) => "refgen",
                E::Io { .. } => "io",
                E::Format { .. } => "format",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(_) => 1,
        }
    }
}
