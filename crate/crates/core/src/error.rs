use thiserror::Error;

/// Errors produced by the filtering library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("participant {participant}: {source}")]
    Participant {
        participant: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("computation cancelled")]
    Cancelled,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn for_participant(self, participant: usize) -> Self {
        Error::Participant { participant, source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
