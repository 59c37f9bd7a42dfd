use thiserror::Error;

/// Errors raised anywhere in the adaptation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("non-finite input in {0}")]
    NonFinite(&'static str),
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("degenerate ID/OOD partition")]
    DegeneratePartition,
    #[error("invalid class index {index} (classes = {classes})")]
    ClassIndex { index: usize, classes: usize },
    #[error("prototype margin {margin} infeasible after {attempts} attempts")]
    MarginInfeasible { margin: f64, attempts: usize },
    #[error("gradient blow-up: {0}")]
    GradientBlowUp(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
