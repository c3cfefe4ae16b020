use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("waveform of {len} samples is too short for a {window}-sample analysis window")]
    TooShort { len: usize, window: usize },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: {left} vs {right} samples")]
    LengthMismatch { left: usize, right: usize },
    #[error("the reference vocoder is not differentiable and cannot be used for training")]
    NonDifferentiableVocoder,
    #[error("non-finite loss at batch {batch}: {detail}")]
    NonFiniteLoss { batch: usize, detail: String },
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}
