use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = StpsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum StpsError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range for {what} with {bound} entries")]
    Bounds {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("data too short: {0}")]
    TooShort(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("checkpoint is missing parameter `{0}`")]
    MissingParameter(String),

    #[error("checkpoint checksum mismatch")]
    Checksum,

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("non-finite loss at {0}")]
    NonFinite(String),

    #[error("model has not been trained")]
    Untrained,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl StpsError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        StpsError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        StpsError::InvalidArgument(msg.into())
    }

    /// True for errors caused by input data (as opposed to numerics or usage).
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            StpsError::Parse { .. }
                | StpsError::Degenerate(_)
                | StpsError::TooShort(_)
                | StpsError::Io(_)
                | StpsError::Checksum
                | StpsError::Version { .. }
                | StpsError::Corrupt(_)
                | StpsError::MissingParameter(_)
        )
    }
}
