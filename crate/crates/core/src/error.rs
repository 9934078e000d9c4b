use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument `{name}`: {detail}")]
    InvalidArgument { name: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: i64, classes: usize },

    #[error("backward called on a non-scalar tensor of shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),

    #[error("every adaptation weight is zero in both domains")]
    AllWeightsZero,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("malformed distribution: row sums to {0}")]
    MalformedDistribution(f64),

    #[error("checkpoint spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("training step {step}: {source}")]
    AtStep { step: u64, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(name: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            detail: detail.into(),
        }
    }
}
