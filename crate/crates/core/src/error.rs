use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numeric core and the segmentation pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("channel-drop vector keeps no channel")]
    EmptyDropVector,
    #[error("mask is empty")]
    EmptyMask,
    #[error("no shots to fuse")]
    NoShots,
    #[error("class {class} out of range ({classes} classes)")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("fold {fold} out of range ({folds} folds)")]
    FoldOutOfRange { fold: usize, folds: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("episode is missing {0}")]
    MissingInput(&'static str),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() })
}
