use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax row {row} has an empty support (every entry masked)")]
    DegenerateRow { row: usize },

    #[error("target row {row} is not a distribution (sum = {sum})")]
    TargetNotNormalized { row: usize, sum: f64 },

    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("frame extents {height}x{width} are not divisible by patch size {patch}")]
    IndivisibleFrame {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("could not place sprites after {attempts} attempts")]
    Placement { attempts: usize },

    #[error("checkpoint does not match configuration: {0}")]
    CheckpointMismatch(String),

    #[error(
        "non-finite loss at step {step} (lr = {lr:e}, grad_norm = {grad_norm:e}, loss = {loss})"
    )]
    NumericalAbort {
        step: u64,
        lr: f64,
        grad_norm: f64,
        loss: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
