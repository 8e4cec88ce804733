use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// A particle left the finite numbers. `snapshot` holds the last
    /// ensemble state in which every coordinate was finite.
    #[error("particle {particle} diverged at step {step}")]
    Divergence {
        particle: usize,
        step: u64,
        snapshot: Vec<Vec<f64>>,
    },

    #[error("grid too small: boundary density ratio {ratio:e} exceeds {limit:e}")]
    GridTooSmall { ratio: f64, limit: f64 },

    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
