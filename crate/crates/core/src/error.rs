use std::path::PathBuf;

use thiserror::Error;

use crate::ast::Label;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("source produced no terminal tokens")]
    UnparseableSource,

    #[error("IoU is undefined when both sets are empty")]
    BothEmpty,

    #[error("bug set is empty over the tokens the model saw")]
    EmptyBugSet,

    #[error("no AST token is covered by the model input")]
    NoCoveredTokens,

    #[error("k = {k} is out of range for {available} tokens")]
    KOutOfRange { k: usize, available: usize },

    #[error("{what}: expected length {expected}, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("dump does not match the source: {unaligned} of {total} input tokens overlap no AST token")]
    MisalignedDump { unaligned: usize, total: usize },

    #[error("no attention cell exceeds threshold {0}")]
    NoHighAttention(f64),

    #[error("threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),

    #[error("interaction matrix needs at least 2 layers, got {0}")]
    TooFewLayers(usize),

    #[error("path needs at least 2 distinct nodes, got {0}")]
    PathTooShort(usize),

    #[error("top-t must be at least 1")]
    InvalidTopT,

    #[error("corpus has no {0} examples")]
    EmptyLabelClass(Label),

    #[error("expected a {expected} annotation, got {actual}")]
    ModeMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("line {line}: label must be 0 or 1, got {value}")]
    Label { line: usize, value: String },

    #[error("corrupt attention tensor {path}: {reason}")]
    CorruptTensor { path: PathBuf, reason: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("invalid dump {path}: {reason}")]
    InvalidDump { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("nothing to report: {0}")]
    EmptyReport(&'static str),

    #[error("non-finite score {score} for example {example_id}")]
    NonFiniteScore { example_id: String, score: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
