use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: left {left:?} vs right {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid tensor: shape {shape:?} implies {expected} elements, got {actual}")]
    BadTensor {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("network spec error: {0}")]
    Spec(String),

    #[error("layer `{0}` is not prunable")]
    NotPrunable(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("mask/layer mismatch on `{layer}`: mask has {mask_bits} bits, layer has {weights} weights")]
    MaskMismatch {
        layer: String,
        mask_bits: usize,
        weights: usize,
    },

    #[error("backward requires a train-mode forward trace with caches")]
    MissingCache,

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("pruning error: {0}")]
    Prune(String),

    #[error("sparsity plan error: {0}")]
    Plan(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged (loss is NaN) at step {step}")]
    Diverged { step: usize },

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
