//! Crate-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or axis mismatch in a tensor operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Value outside the quantizer codebook or malformed packed payload.
    #[error("codec error: {0}")]
    Codec(String),

    /// Invalid configuration (bad field combination, unsupported setup).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid runtime input (e.g. out-of-range token id).
    #[error("input error: {0}")]
    Input(String),

    /// Corrupt or truncated serialized data.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// Dataset generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// Step index outside the schedule's range.
    #[error("range error: {0}")]
    Range(String),

    /// Training loss became NaN or infinite.
    #[error("non-finite loss at step {step} (stage {stage}): {detail}")]
    NonFiniteLoss {
        step: usize,
        stage: usize,
        detail: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn codec(msg: impl Into<String>) -> Self {
        Error::Codec(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn generation(msg: impl Into<String>) -> Self {
        Error::Generation(msg.into())
    }
    pub fn range(msg: impl Into<String>) -> Self {
        Error::Range(msg.into())
    }
}
