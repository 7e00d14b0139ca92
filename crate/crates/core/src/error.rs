use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: {msg}")]
    InvalidOp { op: &'static str, msg: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("grad check: function is not deterministic ({first} != {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset {path}: {msg}")]
    Dataset { path: PathBuf, msg: String },

    #[error("case `{case_id}`: {msg}")]
    Case { case_id: String, msg: String },

    #[error("indicator {index} has no observed values in the training split")]
    AllMissing { index: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch} (last good epoch: {last_good:?})")]
    NonFiniteLoss { epoch: usize, last_good: Option<usize> },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown variant `{name}`; valid names: {valid}")]
    UnknownVariant { name: String, valid: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    pub(crate) fn op(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidOp { op, msg: msg.into() }
    }
}
