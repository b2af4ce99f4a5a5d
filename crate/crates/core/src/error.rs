use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension {0} is not a power of two (>= 2)")]
    NonPowerOfTwoDim(usize),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch {
        expected: &'static str,
        actual: usize,
    },
    #[error("token {token} has norm below the clamp threshold")]
    DegenerateToken { token: usize },
    #[error("input vector is (numerically) zero")]
    ZeroVector,
    #[error("codebook index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("quantized vector is orthogonal to its source")]
    DegenerateProjection,
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}
