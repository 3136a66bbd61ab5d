use thiserror::Error;

/// Errors raised by the analytic engine, the optimizer and the simulator.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("level {requested} exceeds the available depth {available}")]
    Level { requested: usize, available: usize },

    #[error("capacity exhausted at level {level}: partial sum {partial_sum} >= capacity {capacity}")]
    Capacity {
        level: usize,
        partial_sum: f64,
        capacity: f64,
    },

    #[error("numeric degeneracy at level {level}, s = {s}: {detail}")]
    NumericDegeneracy { level: usize, s: f64, detail: String },

    #[error("invalid allocation: {0}")]
    InvalidAllocation(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("no root: {0}")]
    NoRoot(String),

    #[error("iteration did not converge after {iterations} steps: {detail}")]
    NonConvergence { iterations: usize, detail: String },

    #[error("mean overflow time is infinite at level {0} (blocking probability underflowed)")]
    InfiniteOverflowTime(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("optimizer failed: {0}")]
    Optimizer(String),
}

pub type Result<T> = std::result::Result<T, Error>;
