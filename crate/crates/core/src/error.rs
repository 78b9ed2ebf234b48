use thiserror::Error;

/// Errors produced by problem construction, solvers and the experiment drivers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what}: block {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("{what}: expected {expected} blocks, found {found}")]
    BlockCount {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("index {index} out of range (valid: 0..={max})")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("operation not supported for constraint shape {0}")]
    UnsupportedShape(&'static str),
    #[error("step matrix {step} is numerically singular (condition estimate {condition:e})")]
    SingularStep { step: usize, condition: f64 },
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("block {block}: subsolver violated the descent contract ({after} > {before})")]
    DescentViolation { block: usize, before: f64, after: f64 },
    #[error("Newton iteration stagnated at step {step} (residual {residual:e})")]
    NewtonStagnation { step: usize, residual: f64 },
    #[error("penalty selection did not settle at row {row} within {iterations} passes")]
    PenaltySelection { row: usize, iterations: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
