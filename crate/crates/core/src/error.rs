use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("demand node {0} has no compatible supply node")]
    IsolatedDemand(usize),

    #[error("subset enumeration over {m} demand nodes exceeds the cap of {cap}")]
    SubsetCapExceeded { m: usize, cap: usize },

    #[error("complete resource pooling violated by demand subset {subset:?} (slack {slack})")]
    CrpViolated { subset: Vec<usize>, slack: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("linear program is infeasible: {0}")]
    Infeasible(String),

    #[error("linear program is unbounded: {0}")]
    Unbounded(String),

    #[error("state space of {states} states exceeds the cap of {cap}")]
    StateCapExceeded { states: u128, cap: usize },

    #[error("stationary solve did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("no candidate produced a finite objective")]
    NoFiniteObjective,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
