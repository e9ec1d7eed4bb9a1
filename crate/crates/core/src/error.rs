use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("batchnorm layer {layer} evaluated before its running statistics were initialized")]
    BatchNormUninitialized { layer: usize },
    #[error("backward called on a value that was not recorded on this tape")]
    NotRecorded,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("no surviving prunable weights")]
    NoSurvivingWeights,
    #[error("rewind perturbation requested without a snapshot")]
    MissingSnapshot,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("model has no ReLU layers to probe")]
    NoReluLayers,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("malformed IDX data: {0}")]
    Idx(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
