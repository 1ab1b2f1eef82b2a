use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("group level {level} outside capacity {capacity}")]
    LevelOutOfRange { level: u32, capacity: u32 },

    #[error("channel counts ({c_out}, {c_in}) not divisible into {groups} groups")]
    Divisibility { c_out: usize, c_in: usize, groups: usize },

    #[error("invalid cost matrix: {0}")]
    InvalidCost(String),

    #[error("brute-force oracle limited to n <= {max}, got {n}")]
    TooLarge { n: usize, max: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid architecture spec: {0}")]
    Arch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("plan: {0}")]
    Plan(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
