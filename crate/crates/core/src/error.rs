use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("query row {row} has no permitted key position")]
    FullyMaskedRow { row: usize },

    #[error("every position is ignored by the loss mask")]
    AllIgnored,

    #[error("target id {id} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },

    #[error("sequence of {len} positions exceeds the context window of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("out-of-vocabulary token {0:?}")]
    OutOfVocabulary(String),

    #[error("insufficient task diversity: {0}")]
    InsufficientDiversity(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("config digest mismatch: cache was produced by a different model")]
    ConfigDigestMismatch,

    #[error("stage {stage}: {detail}")]
    Stage { stage: String, detail: String },

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
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
