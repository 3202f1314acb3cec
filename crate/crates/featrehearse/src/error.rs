//! Error type shared across the pipeline.

use thiserror::Error;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed on-disk data: bad magic numbers, truncated files, corrupt
    /// checkpoints or metrics artifacts.
    #[error("format error: {0}")]
    Format(String),

    /// Internally inconsistent inputs (count mismatches, labels outside the
    /// active task, overlapping class sets).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Invalid configuration value or unknown configuration key.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor/vector shape mismatch.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Non-finite gradients encountered during optimization.
    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    /// A pipeline stage was invoked in an invalid order (e.g. distillation
    /// without a frozen reference model).
    #[error("orchestration error: {0}")]
    Orchestration(String),

    /// An operation that requires at least one example per class saw none.
    #[error("empty class: {0}")]
    EmptyClass(String),

    /// A dataset with zero examples where a non-empty one is required.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// Evaluation could not be performed (e.g. empty test set).
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// A diagnostic was requested but the run was not configured to track
    /// the data it needs.
    #[error("diagnostic unavailable: {0}")]
    DiagnosticUnavailable(String),

    /// A required input file or directory does not exist.
    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for CLI consumers: 2 config, 3 missing input,
    /// 4 corrupt artifact, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingInput(_) => 3,
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
            Error::Format(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
