//! Error types shared across the simulator.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (dimensions, layer names, bounds, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed data fed to a model or serializer (token ids out of range,
    /// truncated checkpoint, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Structural mismatch between participants of a protocol step, e.g.
    /// aggregating updates with different schemas.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Local training produced a non-finite loss. `step` is the index of the
    /// failing SGD step, counted across epochs.
    #[error("training diverged at step {step}: loss is not finite")]
    TrainingDiverged { step: usize },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("query error: {0}")]
    Query(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
