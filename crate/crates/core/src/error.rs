use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the tensor engine, the network and the training loop.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: non-positive output extent on axis {axis}: {detail}")]
    InvalidExtent {
        op: &'static str,
        axis: &'static str,
        detail: String,
    },

    #[error("{op}: spatial extent {extent} is not divisible by {required}")]
    Indivisible {
        op: &'static str,
        extent: usize,
        required: usize,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("tape has already been consumed by backward")]
    TapeConsumed,

    #[error("target is not one-hot: {0}")]
    NotOneHot(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cannot split {n} samples into {k} folds")]
    FoldCount { k: usize, n: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("phantom sphere does not fit inside the volume: {0}")]
    PhantomOutOfBounds(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
