use thiserror::Error;

/// Errors surfaced by the sampler and metric pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("population death: all particle weights are -inf")]
    PopulationDeath,

    #[error("nested-sampling rejuvenation stalled: no replacement moved at iteration {iteration}")]
    RejuvenationStall { iteration: usize },

    #[error("free-field target is not normalizable: mode eigenvalue {eigenvalue} <= 0")]
    NonNormalizable { eigenvalue: f64 },

    #[error("quadrature refused: V = {volume} exceeds the supported maximum {max}")]
    QuadratureTooLarge { volume: usize, max: usize },

    #[error("covariance factorization failed even after jitter escalation")]
    CovarianceFactorization,

    #[error("warm-up adaptation diverged: divergence rate {rate:.2} in the final window")]
    WarmupDivergence { rate: f64 },

    #[error("empty sample set: {0}")]
    EmptySamples(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
