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
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unsupported constellation order {0} (expected 4, 16, 64 or 256)")]
    UnsupportedOrder(usize),
    #[error("target entropy {target} bits outside achievable range [{min}, {max}]")]
    EntropyOutOfRange { target: f64, min: f64, max: f64 },
    #[error("sequence of length {len} too short for memory {need}")]
    InsufficientGuard { len: usize, need: usize },
    #[error("estimated transmit power is zero")]
    ZeroPower,
    #[error("sampled symbol has zero probability at step {step}")]
    ZeroProbability { step: usize },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at iteration {0}")]
    Divergence(usize),
    #[error("empty input")]
    EmptyInput,
    #[error("matcher context desync at symbol {0}")]
    ContextDesync(usize),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
