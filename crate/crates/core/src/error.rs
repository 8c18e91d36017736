use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("target id {id} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },

    #[error("backward called on a non-scalar tensor of shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("cache holds {actual} positions, expected {expected}")]
    CacheLength { expected: usize, actual: usize },

    #[error("index ordering violated: need i <= j <= k, got i={i}, j={j}, k={k}")]
    IndexOrder { i: usize, j: usize, k: usize },

    #[error("step size must be positive, got {0}")]
    NonPositiveDelta(f64),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch { what: &'static str, left: usize, right: usize },

    #[error("training diverged (non-finite loss) at stage {stage}, step {step}")]
    Diverged { stage: usize, step: usize },

    #[error("corpus has {have} tokens, need at least {need}")]
    CorpusTooSmall { have: usize, need: usize },

    #[error("evaluation split is empty")]
    EmptySplit,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
