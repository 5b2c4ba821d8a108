use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape in {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("attention mask row {row} has no visible position")]
    EmptyMaskRow { row: usize },

    #[error("input too short: {frames} frames, need at least {min}")]
    TooShort { frames: usize, min: usize },

    #[error("chunk size must be even and at least 2, got {0}")]
    OddChunk(usize),

    #[error(
        "CTC target of {labels} labels ({repeats} repeats) cannot be aligned to {frames} frames"
    )]
    CtcInfeasible {
        frames: usize,
        labels: usize,
        repeats: usize,
    },

    #[error("label {label} outside [1, {vocab})")]
    InvalidLabel { label: usize, vocab: usize },

    #[error("gradient requested for non-scalar output of shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("stream error: {0}")]
    Stream(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("unsupported dtype tag {0}")]
    DtypeMismatch(u32),

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("checkpoint mismatch at entry `{name}`: {reason}")]
    CheckpointMismatch { name: String, reason: String },

    #[error("training diverged at step {step}: {source}")]
    Diverged { step: u64, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid_shape(
        op: &'static str,
        shape: &[usize],
        reason: impl Into<String>,
    ) -> Self {
        Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: reason.into(),
        }
    }
}
