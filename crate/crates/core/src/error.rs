use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes between blocks, operators and parameter vectors.
    #[error("structural error: {0}")]
    Structure(String),

    /// Invalid run or file configuration, detected before any computation.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical domain violation (log of a non-positive rate, etc.).
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite state produced by the integrator.
    #[error("integrator failure at step {step}: {reason}")]
    Integrator { step: usize, reason: String },

    /// A jump was recorded while the filter's total intensity vanished.
    #[error("degenerate intensity on channel {channel}: jump observed with zero predicted rate")]
    DegenerateIntensity { channel: usize },

    /// No grid satisfies the design conditions.
    #[error("infeasible design: {binding}")]
    Infeasible { binding: String },

    /// The requested parameter cannot be estimated from QND records.
    #[error("non-identifiable parameter {param}: {explanation}")]
    NonIdentifiable { param: String, explanation: String },

    /// Record file was produced by a different model.
    #[error("record/model hash mismatch: record {record}, model {model}")]
    HashMismatch { record: String, model: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
