use thiserror::Error;

/// Errors raised by the compression engine and its trace I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("attention matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("causality violation: entry ({row}, {col}) = {value} above the diagonal")]
    CausalityViolation { row: usize, col: usize, value: f64 },

    #[error("row {row} sums to {sum}, expected 1 within 1e-6")]
    NotStochastic { row: usize, sum: f64 },

    #[error("entry ({row}, {col}) = {value} is negative or not finite")]
    InvalidEntry { row: usize, col: usize, value: f64 },

    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("budget {budget} exceeds {available} available multimodal tokens")]
    Budget { budget: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed trace: {0}")]
    Format(String),

    #[error("unsupported trace version {found} (expected {expected})")]
    Version { found: String, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
