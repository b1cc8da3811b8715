use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("backward requires a tracked scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("operands were recorded on different tapes")]
    TapeMismatch,

    #[error("tensor is not tracked on the given tape")]
    NotTracked,

    /// Non-finite values showed up mid-computation; the run must halt.
    #[error("poisoned state: non-finite values in {context}")]
    Poisoned { context: String },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("distillation requires a teacher model")]
    MissingTeacher,

    #[error("checkpoint version mismatch: found {found}, supported {supported}")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("checkpoint parameter block truncated: expected {expected} bytes, found {found}")]
    CheckpointTruncated { expected: u64, found: u64 },

    #[error("checkpoint dimension inconsistency: {0}")]
    CheckpointDims(String),

    #[error("checkpoint header: {0}")]
    CheckpointHeader(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable category, used by the CLI for exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. }
            | Error::InvalidShape { .. }
            | Error::NonScalarLoss { .. }
            | Error::TapeMismatch
            | Error::NotTracked => "shape",
            Error::Poisoned { .. } => "poisoned",
            Error::Diverged { .. } => "diverged",
            Error::MissingTeacher => "missing-teacher",
            Error::CheckpointVersion { .. }
            | Error::CheckpointTruncated { .. }
            | Error::CheckpointDims(_)
            | Error::CheckpointHeader(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}
