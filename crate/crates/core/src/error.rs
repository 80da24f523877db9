use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("backward already ran on this graph; build a new graph for another pass")]
    BackwardTwice,

    #[error("loss node must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("alignment infeasible: label needs at least {needed} frames, got {frames}")]
    InfeasibleAlignment { needed: usize, frames: usize },

    #[error("unknown phone symbol `{0}`")]
    UnknownSymbol(String),

    #[error("min_count {min_count} unreachable: class `{class}` occurs only {available} times")]
    InfeasibleSubset {
        class: String,
        available: usize,
        min_count: usize,
    },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: file is truncated or corrupted")]
    Checksum,

    #[error("wav: {0}")]
    Wav(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by NaN/Inf during training or evaluation.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonFiniteGradient(_))
    }
}
