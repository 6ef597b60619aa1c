use thiserror::Error;

pub type Result<T, E = DecodeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("domain error in {func}: argument {value} outside the supported domain")]
    Domain { func: &'static str, value: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("invalid domain spec field `{field}`: {reason}")]
    Spec { field: &'static str, reason: String },

    #[error("parameter manifest mismatch: expected {expected}, got {actual}")]
    Manifest { expected: String, actual: String },

    #[error("malformed dataset record {index} at byte offset {offset}: {reason}")]
    Dataset {
        index: usize,
        offset: u64,
        reason: String,
    },

    #[error("checkpoint corrupted at byte offset {offset}: {reason}")]
    Corrupted { offset: u64, reason: String },

    #[error("unsupported {what} format version {found} (this build reads version {supported})")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("no finalized domain queries; use the generalized-only prediction path")]
    NoFinalizedQueries,

    #[error("phase error: {0}")]
    Phase(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DecodeError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DecodeError::Invalid(msg.into())
    }
}
