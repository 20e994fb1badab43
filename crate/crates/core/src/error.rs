use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands whose shapes must agree do not.
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    /// Input outside an operation's domain (empty softmax, non-positive length, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Cross-structure invariant violated (scores vs. active set, adjacency vs. rows).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// A scalar objective came back non-finite.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("training aborted: {0}")]
    Training(String),

    /// A file parsed but its content does not follow the documented format.
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Dimension {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
