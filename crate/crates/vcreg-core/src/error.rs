//! Crate-wide error type.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors produced by tensor, graph, and training operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An operation received tensors whose shapes do not fit it.
    Shape { op: &'static str, detail: String },
    /// An operation produced or received a NaN or infinite value.
    NonFinite { context: String },
    /// The training loop hit a non-finite loss or gradient.
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        site: Option<String>,
    },
    /// `backward` was called on a node that is not a scalar.
    NotScalarLoss { shape: Vec<usize> },
    /// `backward` was called twice on the same graph.
    BackwardConsumed,
    /// `backward` was called on a graph built with gradients disabled.
    GradDisabled,
    /// A class label is outside `0..classes`.
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    /// A batch has too few rows for the requested statistic.
    BatchTooSmall { n: usize, needed: usize },
    /// A feature dimension is too small for the requested statistic.
    DimTooSmall { d: usize, needed: usize },
    /// A scalar parameter is out of its valid range.
    InvalidParam { name: &'static str, why: String },
    /// A VCReg placement names boundaries the model does not have.
    PlacementUnavailable {
        placement: &'static str,
        model: String,
    },
    /// Class structure unusable for the requested metric.
    DegenerateClasses { detail: String },
    /// No grid cell with an opposing prediction exists for a training point.
    NoOppositeCell { point: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::NonFiniteLoss { epoch, step, site } => match site {
                Some(name) => write!(
                    f,
                    "non-finite loss at epoch {epoch}, step {step}, site {name}"
                ),
                None => write!(f, "non-finite loss at epoch {epoch}, step {step}"),
            },
            Error::NotScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::BackwardConsumed => {
                write!(f, "backward already ran on this graph; rebuild the forward pass")
            }
            Error::GradDisabled => {
                write!(f, "backward called on a graph built with gradients disabled")
            }
            Error::LabelOutOfRange {
                index,
                label,
                classes,
            } => write!(
                f,
                "label {label} at row {index} is out of range for {classes} classes"
            ),
            Error::BatchTooSmall { n, needed } => {
                write!(f, "batch has {n} rows, needs at least {needed}")
            }
            Error::DimTooSmall { d, needed } => {
                write!(f, "feature dimension {d} is below the required {needed}")
            }
            Error::InvalidParam { name, why } => write!(f, "invalid {name}: {why}"),
            Error::PlacementUnavailable { placement, model } => {
                write!(f, "placement {placement} selects no boundary on {model}")
            }
            Error::DegenerateClasses { detail } => write!(f, "degenerate classes: {detail}"),
            Error::NoOppositeCell { point } => write!(
                f,
                "no grid cell predicts a different class than training point {point}; \
                 grid too coarse or classifier constant"
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
