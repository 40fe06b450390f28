use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("invalid dictionary: {0}")]
    InvalidDictionary(String),

    #[error("empty sequence")]
    EmptySequence,

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("line {line}: {message}")]
    Row { line: usize, message: String },

    #[error("model is not frozen")]
    NotFrozen,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by bad inputs or configuration rather than by
    /// a failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::Index { .. }
                | Error::InvalidDictionary(_)
                | Error::EmptySequence
                | Error::DegenerateData(_)
                | Error::Config(_)
                | Error::Format(_)
                | Error::Row { .. }
                | Error::NotFrozen
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}
