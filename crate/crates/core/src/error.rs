use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or input value violates its contract.
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("unknown intent `{0}`")]
    UnknownIntent(String),

    #[error("out-of-vocabulary word `{0}`")]
    OutOfVocabulary(String),

    #[error("invalid token id {0}")]
    InvalidToken(usize),

    #[error("schema/vocab mismatch: {0}")]
    SchemaMismatch(String),

    #[error("{path}:{line}: malformed record: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("incomplete reward log for samples: {}", .0.join(", "))]
    IncompleteLog(Vec<String>),

    #[error("non-finite value in group {group}: {what}")]
    NonFinite { group: usize, what: String },

    #[error("positive pool too small: requested {requested}, available {available} (short by {})", .requested - .available)]
    PoolShortfall { requested: usize, available: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs rather than failures mid-run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. }
                | Error::UnknownIntent(_)
                | Error::OutOfVocabulary(_)
                | Error::InvalidToken(_)
                | Error::SchemaMismatch(_)
                | Error::Malformed { .. }
                | Error::IncompleteLog(_)
                | Error::PoolShortfall { .. }
                | Error::Empty(_)
        ) || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
