use thiserror::Error;

/// Errors raised by the laboratory's numerical routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("sample index {index} out of range for ensemble of size {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("non-differentiable point: {0}")]
    NonDifferentiable(String),

    #[error("empty index list")]
    EmptyBatch,

    #[error("diffusion clamp too large: clamped {clamped:e} vs bound {bound:e}")]
    ClampExceeded { clamped: f64, bound: f64 },

    #[error("descriptor error: {0}")]
    Descriptor(String),
}

pub type Result<T> = std::result::Result<T, Error>;
