use thiserror::Error;

/// Errors produced anywhere in the editing pipeline.
#[derive(Debug, Error)]
pub enum SpecRefError {
    #[error("invalid schedule/run configuration: {0}")]
    InvalidScheduleConfig(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("non-finite value in {0}")]
    NonFiniteInput(String),

    #[error("mask entries must be 0 or 1")]
    NonBinaryMask,

    #[error("source mask has no active key position")]
    EmptySourceMask,

    #[error("mask image has no active pixel after binarization")]
    EmptyMask,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("duplicate entry for step {t}, layer {layer}")]
    DuplicateEntry { t: usize, layer: usize },

    #[error("no reference features recorded for step {t}, layer {layer}")]
    MissingEntry { t: usize, layer: usize },

    #[error("no cross-attention maps recorded for step {t}, token {token}")]
    MissingRecords { t: usize, token: usize },

    #[error("trajectory has no latent for step {0}")]
    MissingTrajectoryEntry(usize),

    #[error("invalid edit request: {0}")]
    InvalidRequest(String),

    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("payload truncated")]
    TruncatedPayload,

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SpecRefError {
    pub(crate) fn shape(expected: impl std::fmt::Debug, found: impl std::fmt::Debug) -> Self {
        SpecRefError::ShapeMismatch { expected: format!("{expected:?}"), found: format!("{found:?}") }
    }

    /// Process exit code for this error class. Each class has its own code;
    /// 1 and 2 are left to generic failures and argument parsing.
    pub fn exit_code(&self) -> u8 {
        match self {
            SpecRefError::InvalidScheduleConfig(_) => 10,
            SpecRefError::ShapeMismatch { .. } => 11,
            SpecRefError::NonFiniteInput(_) => 12,
            SpecRefError::NonBinaryMask => 13,
            SpecRefError::EmptySourceMask => 14,
            SpecRefError::EmptyMask => 15,
            SpecRefError::DimensionMismatch(_) => 16,
            SpecRefError::DuplicateEntry { .. } => 17,
            SpecRefError::MissingEntry { .. } => 18,
            SpecRefError::MissingRecords { .. } => 19,
            SpecRefError::MissingTrajectoryEntry(_) => 20,
            SpecRefError::InvalidRequest(_) => 21,
            SpecRefError::Consistency(_) => 22,
            SpecRefError::CorruptHeader(_) => 23,
            SpecRefError::TruncatedPayload => 24,
            SpecRefError::ChecksumMismatch { .. } => 25,
            SpecRefError::UnsupportedFormat(_) => 26,
            SpecRefError::MalformedHeader(_) => 27,
            SpecRefError::Io(_) => 28,
        }
    }
}

pub type Result<T> = std::result::Result<T, SpecRefError>;
