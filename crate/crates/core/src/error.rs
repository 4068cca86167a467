use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced at layer {layer}")]
    NonFinite { layer: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("metric undefined on an empty dataset")]
    EmptyDataset,

    #[error("window out of bounds: K={k} K'={k_prime} exceeds N={n}")]
    Bounds { k: usize, k_prime: usize, n: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("verification rounds exhausted: {prev_rounds} rounds of K={k} exceed N={n}")]
    ProtocolExhausted {
        prev_rounds: usize,
        k: usize,
        n: usize,
    },

    #[error("training diverged at {stage}")]
    Diverged { stage: String },

    #[error("normal approximation invalid at J={j}: sigma^2 = {sigma2}")]
    ApproximationInvalid { j: u64, sigma2: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
