use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("pump P = {pump} requires sigma > 0: the laser amplitude is undefined in the classical limit")]
    UndefinedCoupling { pump: f64 },

    #[error("sigma = 0 is the classical limit; use the semi-classical dynamics instead")]
    ClassicalLimit,

    #[error("step size underflow at tau = {tau} (h = {step:e})")]
    StepUnderflow { tau: f64, step: f64 },

    #[error("non-finite state at tau = {tau}")]
    Divergence { tau: f64 },

    #[error("integration exceeded {max_steps} steps before tau = {tau}")]
    TooManySteps { tau: f64, max_steps: usize },

    #[error("Fourier truncation N = {truncation} too small: tail ratio {tail:e}")]
    Truncation { truncation: usize, tail: f64 },

    #[error("not enough samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("sampling grid is not uniform")]
    NonUniformSampling,

    #[error("sampling cadence {step} does not divide the period 2*pi")]
    CadenceMismatch { step: f64 },

    #[error("state norm collapsed to {norm:e} at tau = {tau}")]
    NormCollapse { tau: f64, norm: f64 },

    #[error("Fock-space leakage {leakage:e} exceeds {limit:e} at tau = {tau}; increase the cutoffs")]
    Leakage { tau: f64, leakage: f64, limit: f64 },

    #[error("Hilbert-space dimension {dim} exceeds the budget {budget}")]
    DimensionBudget { dim: usize, budget: usize },

    #[error("trajectory {index} failed: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}
