use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("loss function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("record {record}: missing field `{field}`")]
    MissingField { record: String, field: String },

    #[error("checkpoint lineage: {0}")]
    Lineage(String),

    #[error("checkpoint version {found} is not supported (expected {expected}); re-export it with a matching build")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
