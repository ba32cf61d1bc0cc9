use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// The variants are grouped so the CLI can map them onto distinct exit
/// statuses: configuration problems, data problems and numerical aborts.
#[derive(Debug, Error)]
pub enum GpnError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{what} index {index} out of range (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("corrupt file at byte offset {offset} (record {record}): {reason}")]
    Corrupt { offset: u64, record: usize, reason: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl GpnError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        GpnError::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Coarse category used for process exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            GpnError::Config(_) | GpnError::UnknownKey(_) => ErrorCategory::Config,
            GpnError::Data(_) | GpnError::Corrupt { .. } | GpnError::Io(_) | GpnError::Json(_) => ErrorCategory::Data,
            GpnError::NonFinite { .. } | GpnError::Diverged { .. } => ErrorCategory::Numerical,
            GpnError::Shape { .. } | GpnError::NonScalarLoss(_) | GpnError::OutOfRange { .. } => ErrorCategory::Usage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
    Usage,
}

pub type Result<T> = std::result::Result<T, GpnError>;
