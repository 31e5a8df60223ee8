use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type for the whole pipeline.
///
/// Variants are grouped by how the CLI reports them: input problems
/// (bad files, bad config, bad arguments) exit with 2, artifact problems
/// (checkpoint/config mismatches) with 3, numerical failures with 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dataset not found: {0}")]
    DatasetNotFound(PathBuf),

    #[error("malformed record at line {line}: {msg}")]
    MalformedRecord { line: usize, msg: String },

    #[error("invalid label at line {line}: {msg}")]
    InvalidLabel { line: usize, msg: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("record without label: {0}")]
    MissingLabel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenIdOutOfRange { id: usize, vocab_size: usize },

    #[error("non-finite activation in encoder layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite loss at step {step} during {stage}")]
    NonFiniteLoss { stage: String, step: usize },

    #[error("degenerate probe split: {0}")]
    DegenerateSplit(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// Process exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DatasetNotFound(_)
            | Error::MalformedRecord { .. }
            | Error::InvalidLabel { .. }
            | Error::EmptyCorpus
            | Error::MissingLabel(_)
            | Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::Io(_) => 2,
            Error::CheckpointMismatch(_) | Error::CheckpointFormat(_) => 3,
            Error::TokenIdOutOfRange { .. }
            | Error::NonFiniteActivation { .. }
            | Error::NonFiniteLoss { .. }
            | Error::DegenerateSplit(_)
            | Error::Numerical(_) => 4,
        }
    }
}
