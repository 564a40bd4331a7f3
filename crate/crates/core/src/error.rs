use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{context}: non-finite value at coordinate {index}")]
    NonFinite { context: &'static str, index: usize },
    #[error("routing: degenerate embedding at sample {sample}, site {site} (norm {norm:e})")]
    DegenerateEmbedding { sample: usize, site: usize, norm: f64 },
    #[error("contrastive: batch has no {0} pairs; the sampler must mix degradation families")]
    MissingPairs(&'static str),
    #[error("data: {0}")]
    Data(String),
    #[error("training aborted at step {step}: non-finite loss (l1 {l1}, hc {hc})")]
    NonFiniteLoss { step: usize, l1: f64, hc: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

pub(crate) fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
