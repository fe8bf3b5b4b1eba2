use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("division by exact zero")]
    DivisionByZero,

    #[error("log of non-positive value {value}")]
    LogDomain { value: f64 },

    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,

    #[error("variable belongs to a different tape")]
    ForeignVar,

    #[error("non-deterministic function: repeated forward passes disagree ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("unknown tap point `{0}`")]
    UnknownTap(String),

    #[error("degenerate attention map for sample {sample} (all zeros)")]
    DegenerateAttention { sample: usize },

    #[error("local split needs even spatial extents, got {height}x{width}")]
    OddSpatial { height: usize, width: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("{path}: expected {expected} bytes, found {found}")]
    DataLength {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("bad tensor file: {0}")]
    Format(String),

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
