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

    #[error("malformed JSON on line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("no lessons in {0}")]
    NoLessons(PathBuf),

    #[error("invalid data ({location}): {reason}")]
    Invalid { location: String, reason: String },

    #[error("duplicate id {0}")]
    DuplicateId(String),

    #[error("diagram feature file: {0}")]
    FeatureFormat(String),

    #[error("missing diagram feature {0}")]
    MissingDiagramFeature(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty context: no candidate evidence spans for question {0}")]
    EmptyContext(String),

    #[error("numerical abort on question {question_id}: {detail}")]
    NumericalAbort { question_id: String, detail: String },

    #[error("vocabulary hash mismatch: checkpoint has {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Empty(String),

    #[error("unknown question {0}")]
    UnknownQuestion(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(location: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            location: location.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by non-finite values during training or
    /// inference rather than by bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NumericalAbort { .. })
    }
}
