use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or size requirements violated (odd dims, mismatched operands, ...).
    #[error("dimension error: {0}")]
    Dim(String),

    /// A parameter is outside its documented domain.
    #[error("parameter error: {0}")]
    Param(String),

    /// An operation was called in a state it does not support (e.g. empty queue).
    #[error("state error: {0}")]
    State(String),

    /// A differentiability or scalar-output contract was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// The loss became non-finite; carries the diagnostic breakdown.
    #[error("non-finite loss at step {step}: snf={snf} encoder={encoder} degrad={degrad}")]
    NonFiniteLoss {
        step: u64,
        snf: f32,
        encoder: f32,
        degrad: f32,
    },

    /// Checkpoint or config file could not be decoded.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Checkpoint was written by an incompatible format version.
    #[error("incompatible checkpoint version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }
}
