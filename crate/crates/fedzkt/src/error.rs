//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer} ({kind}): expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        layer: usize,
        kind: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid layer {layer} ({kind}): {reason}")]
    InvalidLayer {
        layer: usize,
        kind: &'static str,
        reason: String,
    },

    #[error("length mismatch in {context}: {left} vs {right}")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("unknown model '{name}'; catalog: {catalog:?}")]
    UnknownModel { name: String, catalog: Vec<String> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("idx file '{path}': {reason}")]
    IdxFormat { path: String, reason: String },

    #[error("checkpoint '{path}': {reason}")]
    Checkpoint { path: String, reason: String },

    #[error("device {device}: {reason}")]
    Device { device: usize, reason: String },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with the communication round it occurred in.
    pub fn in_round(self, round: usize) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
