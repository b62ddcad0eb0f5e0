use thiserror::Error;

/// Errors produced by the simulator library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("rank {rank} out of range for world size {world_size}")]
    RankOutOfRange { rank: usize, world_size: usize },

    #[error("learning rate must be positive to recover an update")]
    ZeroLearningRate,

    #[error("example index {index} out of range for dataset of {len} examples")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("divergence at iteration {iteration} on worker {worker}: loss = {loss}")]
    Divergence { iteration: usize, worker: usize, loss: f64 },

    #[error("collective failure: {0}")]
    Collective(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("too few samples: need at least {required}, got {found}")]
    TooFewSamples { required: usize, found: usize },

    #[error("learning-rate schedule violates {0}")]
    Schedule(String),

    #[error("data format: {0}")]
    DataFormat(String),
}

pub type Result<T> = std::result::Result<T, Error>;
