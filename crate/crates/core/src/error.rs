//! Error type shared by every module of the crate.

use std::io;

/// Errors produced by numerics, models, analytics and the command-line surface.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate distribution: every entry along the softmax axis is -inf")]
    DegenerateDistribution,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sequence of {len} tokens exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("generation stopped at {len} tokens: context length {max} reached")]
    Truncated { len: usize, max: usize },

    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    InvalidToken { id: u32, vocab: usize },

    #[error("input error: {0}")]
    Input(String),

    #[error("no data: {0}")]
    NoData(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
