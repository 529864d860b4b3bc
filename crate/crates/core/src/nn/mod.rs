//! Minimal neural-network substrate: dense, convolution, group norm,
//! activations, cross-entropy and exact per-example backpropagation.

pub mod arch;
pub mod checkpoint;
mod layer;
mod loss;
mod model;
mod norm;

pub use layer::{Layer, LayerKind};
pub use loss::cross_entropy;
pub use model::{Evaluator, Model, PerExampleGrads};
pub use norm::{group_norm_forward, weight_standardize, GROUP_NORM_EPS, WEIGHT_STD_EPS};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("layer `{layer}`: expected input {expected}, got {actual:?}")]
    Shape {
        layer: String,
        expected: String,
        actual: Vec<usize>,
    },
    #[error("non-finite value produced in layer `{layer}`")]
    NonFinite { layer: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("group count {groups} does not divide {channels} channels")]
    GroupsDoNotDivide { channels: usize, groups: usize },
    #[error("weight standardization needs fan-in >= 2, got {0}")]
    FanInTooSmall(usize),
    #[error("{0}")]
    InvalidHyper(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
