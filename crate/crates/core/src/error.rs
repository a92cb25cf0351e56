use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("encoder failed: {0}")]
    Encoder(String),

    #[error("design error: {0}")]
    Design(String),

    #[error("participant {0} has reached the batch limit")]
    LimitReached(String),

    #[error("study complete: every batch has reached its coverage target")]
    StudyComplete,

    #[error("unknown {kind}: {id}")]
    Unknown { kind: &'static str, id: String },

    #[error("duplicate response with different content for {0}")]
    Duplicate(String),

    #[error("rejected response: {0}")]
    Rejected(String),

    #[error("unauthorized")]
    Unauthorized,

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("correlation error: {0}")]
    Correlation(String),

    #[error("pipeline stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            message: message.to_string(),
        }
    }
}
