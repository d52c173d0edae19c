use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid weight matrix: {0}")]
    InvalidWeights(String),

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("best arm of agent {agent} is not unique (arms {first} and {second} tie)")]
    NonUniqueOptimum {
        agent: usize,
        first: usize,
        second: usize,
    },

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("problem too large for the reference solver: {0}")]
    TooLarge(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// An internal invariant of a policy was violated during a run.
    #[error("policy invariant violated at round {round}: {reason}")]
    Invariant { round: u64, reason: String },
}
