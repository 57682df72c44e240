use thiserror::Error;

/// Errors produced by the engine and the analysis operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward already ran on this tape; build a new forward pass first")]
    TapeSpent,

    #[error("{file}: bad magic (expected {expected}, found {found})")]
    BadMagic {
        file: String,
        expected: String,
        found: String,
    },

    #[error("{file}: truncated ({context})")]
    Truncated { file: String, context: String },

    #[error("{file}: count mismatch ({context})")]
    CountMismatch { file: String, context: String },

    #[error("{file}: unsupported format version {found} (engine supports {supported})")]
    VersionMismatch {
        file: String,
        found: u32,
        supported: u32,
    },

    #[error("{file}: {context}")]
    Format { file: String, context: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
