//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        node: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("tensor shape {shape:?} does not match data length {len}")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("unbound graph input `{0}`")]
    UnboundInput(String),
    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("non-finite value produced by node {node} ({context})")]
    NonFinite { node: usize, context: String },
    #[error("training batch must contain at least 2 examples, got {0}")]
    BatchTooSmall(usize),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("batch size mismatch: clean {clean} vs adversarial {adv}")]
    BatchSizeMismatch { clean: usize, adv: usize },
    #[error("non-finite gradient during adversarial attack: {0}")]
    NonFiniteAttackGradient(String),
    #[error("non-finite gradient passed to optimizer: {0}")]
    NonFiniteGradient(String),
    #[error("non-finite trust ratio in LARS step (layer {0})")]
    NonFiniteTrust(usize),
    #[error("stale buffer violated: {0}")]
    StaleBuffer(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error("probe error: {0}")]
    Probe(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
