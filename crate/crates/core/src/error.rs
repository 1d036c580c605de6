use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty support: no unmasked entries remain")]
    EmptySupport,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("untraced tensor: {0}")]
    Untraced(String),

    #[error("invalid configuration: {field}: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("leakage risk: auxiliary decoder must have exactly one layer, got {0}")]
    LeakageRisk(usize),

    #[error("adaption factor {0} outside (0, 1]")]
    InvalidEpsilon(f64),

    #[error("unknown mode `{0}`")]
    UnknownMode(String),

    #[error("no n-grams in input")]
    NoNgrams,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }
}
