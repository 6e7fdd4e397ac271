use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A level, grid or estimator configuration violates its contract.
    #[error("configuration error: {0}")]
    Config(String),

    /// A trajectory produced a non-finite state.
    #[error("simulation diverged at level {level}, path {path}, step {step}")]
    Diverged { level: usize, path: u64, step: usize },

    #[error("empty sample set")]
    EmptySample,

    #[error("invalid sample counts: {0}")]
    SampleCounts(String),

    #[error("invalid coefficients: {0}")]
    Coefficients(String),

    /// Level statistics that make correlations or coefficients undefined.
    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    #[error("budget {budget} is infeasible, at least {minimum} is required")]
    InfeasibleBudget { budget: f64, minimum: f64 },

    #[error("invalid cost weights: {0}")]
    CostWeights(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
