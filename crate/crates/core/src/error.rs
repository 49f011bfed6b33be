//! Error type shared across the crate.

use alloc::string::String;

/// Errors produced by fitting, evaluation and testing routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An input that must be finite was NaN or infinite.
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    /// Cholesky factorisation failed even after the jitter ladder.
    #[error("ill-conditioned kernel")]
    IllConditioned,

    /// A sample set without enough variation to fit anything.
    #[error("degenerate sample")]
    DegenerateSample,

    /// Constant input to the independence test.
    #[error("degenerate sample for independence test")]
    DegenerateIndependenceSample,

    /// The optimiser produced a non-finite loss.
    #[error("diverged at step {step}")]
    Diverged { step: usize },

    /// A gradient entry was NaN or infinite.
    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },

    /// Inputs violate a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl core::fmt::Display) -> Self {
        Error::InvalidInput(alloc::format!("{msg}"))
    }
}
