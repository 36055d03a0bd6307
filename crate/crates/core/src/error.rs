//! Error type shared by every stage of the pipeline.

use thiserror::Error;

/// Failure modes of model construction, discretization and the solvers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemlqError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("horizon must be positive, got {0}")]
    BadHorizon(f64),
    #[error("grid needs at least 2 steps, got {0}")]
    BadGrid(usize),
    #[error("history length mismatch: expected {expected}, got {got}")]
    HistoryLengthMismatch { expected: usize, got: usize },
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("no convergence after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("estimated storage of {required} bytes exceeds the cap of {cap} bytes")]
    MemoryBudgetExceeded { required: u64, cap: u64 },
}

pub type Result<T> = std::result::Result<T, MemlqError>;
