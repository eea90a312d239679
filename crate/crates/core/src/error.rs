use std::io;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("node is not on this tape")]
    NotOnTape,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SeqTooLong { len: usize, max: usize },
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),
    #[error("prompt contains the reserved introspection token at position {0}")]
    ReservedTokenInPrompt(usize),
    #[error("invalid prompt: {0}")]
    InvalidPrompt(&'static str),
    #[error("unknown LoRA target `{0}`")]
    UnknownTarget(String),
    #[error("invalid label {0}; expected 0 or 1")]
    InvalidLabel(u8),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training mode does not match the model: {0}")]
    ModeMismatch(String),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("prompt {0} is already labeled")]
    AlreadyLabeled(u64),
    #[error("split fractions are invalid: {0}")]
    BadFractions(String),
    #[error("both classes must be present")]
    DegenerateLabels,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("input is empty")]
    EmptyInput,
    #[error("bad threshold grid: {0}")]
    BadGrid(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// Whether this error originates from the filesystem.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
