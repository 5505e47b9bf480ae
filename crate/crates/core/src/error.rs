use std::io;

use thiserror::Error;

/// Failures surfaced by the checkpoint reader/writer.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}, expected \"RLSM\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("parameter `{path}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        path: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint holds unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParameter(String),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("empty input sequence")]
    EmptySequence,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
