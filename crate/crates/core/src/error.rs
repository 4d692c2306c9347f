use thiserror::Error;

pub type Result<T> = std::result::Result<T, LaprError>;

#[derive(Debug, Error)]
pub enum LaprError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An embedding collapsed to (near) zero norm where a direction is required.
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    /// Positive and negative sets could not be separated for a query.
    #[error("degenerate supervision for query {query}: {reason}")]
    DegenerateSupervision { query: usize, reason: String },

    #[error("stale mode cache: built for prompt bank {cached:#018x}, current bank is {current:#018x}")]
    StaleCache { cached: u64, current: u64 },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl LaprError {
    /// Process exit status for this error: 2 usage/config, 3 I/O or file
    /// format, 4 numerical fault.
    pub fn exit_code(&self) -> i32 {
        match self {
            LaprError::InvalidArgument(_) | LaprError::Generation(_) => 2,
            LaprError::Format { .. } | LaprError::Io(_) | LaprError::Json(_) | LaprError::Csv(_) => 3,
            LaprError::DegenerateVector(_)
            | LaprError::DegenerateSupervision { .. }
            | LaprError::StaleCache { .. }
            | LaprError::UndefinedCorrelation(_) => 4,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LaprError::InvalidArgument(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        LaprError::DegenerateVector(msg.into())
    }
}
