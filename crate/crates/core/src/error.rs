use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid particle set: {0}")]
    InvalidParticleSet(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    /// The likelihood vanishes on the entire support of the prior.
    #[error("update impossible: likelihood is zero at every particle")]
    UpdateImpossible,

    #[error("coincident particles {first} and {second} make the Hessian singular")]
    Coincidence { first: usize, second: usize },

    #[error("flow stalled at gamma = {gamma}: {reason} (last damping {damping:e})")]
    FlowStalled {
        gamma: f64,
        damping: f64,
        reason: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("measurement function undefined at the given state")]
    MeasurementUndefined,

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
