use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value outside the domain an operation accepts (bad token id, empty dataset, ...).
    #[error("input domain error: {0}")]
    InputDomain(String),

    /// Exhaustive enumeration would exceed the configured sequence budget.
    #[error("capacity exceeded: {sequences} sequences to enumerate, limit is {limit}")]
    Capacity { sequences: u128, limit: u64 },

    /// Every particle weight is non-finite, so nothing can be resampled or normalized.
    #[error("weight degeneracy at step {step}: {particles} particles, max log-weight {max_log_weight}")]
    Degeneracy {
        step: usize,
        particles: usize,
        max_log_weight: f64,
    },

    #[error("rejection sampler starved: {accepted} accepts after {attempts} attempts (cap {cap})")]
    Starvation {
        accepted: usize,
        attempts: u64,
        cap: u64,
    },

    /// GRPO batch whose rewards have zero spread; the update is skipped.
    #[error("degenerate batch: reward standard deviation is zero")]
    DegenerateBatch,

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::InputDomain(msg.into())
    }
}
