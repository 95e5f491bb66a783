use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("factorization failed after jitter levels {jitters:?}")]
    Factorization { jitters: Vec<f64> },

    #[error("objective is not finite at the initial point")]
    NonFiniteInit,

    #[error("unsupervised tuning with {method} failed: {reason}")]
    Tuning { method: String, reason: String },

    #[error("propagation failed: {skipped} of {total} draws skipped")]
    TooManySkipped { skipped: usize, total: usize },
}
