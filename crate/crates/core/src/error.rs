use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layer sizes {0:?}: need at least two positive sizes")]
    InvalidLayerSizes(Vec<usize>),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("stale forward cache (cache version {cache}, network version {network})")]
    StaleCache { cache: u64, network: u64 },

    #[error("non-finite gradient rejected")]
    NonFiniteGradient,

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(&'static str),

    #[error("zero-norm embedding")]
    ZeroNorm,

    #[error("invalid rho {0}: must be positive")]
    InvalidRho(f64),

    #[error("oracle budget exhausted ({used}/{total})")]
    BudgetExhausted { used: usize, total: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("malformed metrics: {0}")]
    Metrics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
