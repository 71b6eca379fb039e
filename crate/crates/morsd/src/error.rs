//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}:{line}: malformed record: {msg}")]
    MalformedLine { path: String, line: usize, msg: String },

    #[error("duplicate question id {0:?}")]
    DuplicateId(String),

    #[error("unknown question id {0:?}")]
    UnknownQuestion(String),

    #[error("completion contains no answer marker")]
    MarkerMissing,

    #[error("no parseable answer in {0:?}")]
    AnswerUnparseable(String),

    #[error("endpoint request failed after {attempts} attempt(s): {msg}")]
    Endpoint { msg: String, attempts: u32 },

    #[error("generation failed for question {question_id:?} sample {index}: {source}")]
    Generation {
        question_id: String,
        index: u32,
        source: Box<Error>,
    },

    #[error("zero-probability token at target position {position}")]
    ZeroProbability { position: usize },

    #[error("scoring target produced no tokens")]
    EmptyTarget,

    #[error("scoring aborted: {failed} of {total} records failed (over 10% threshold)")]
    TooManyScoreFailures { failed: usize, total: usize },

    #[error("judge reply not parseable as two scores: {0:?}")]
    VerdictUnparseable(String),

    #[error("missing input file: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// True for errors that should surface as a usage problem (exit code 2).
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::MissingInput(_) | Error::InvalidConfig(_))
    }
}
