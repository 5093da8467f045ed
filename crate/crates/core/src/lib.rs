//! Distributed conservation voltage reduction on integrated primary and
//! secondary distribution feeders.
//!
//! The crate is organized around a nonlinear three-phase power flow that
//! plays the physical system, the convex subproblems a leader (primary) and
//! followers (secondaries) solve from its measurements, and a deterministic
//! message bus over which the asynchronous ADMM iterations run.

pub mod coordinator;
pub mod generator;
pub mod network;
pub mod phase;
pub mod powerflow;
pub mod simbus;
pub mod subproblem;

use std::path::Path;

pub use cvr_qp as qp;

#[derive(Debug, thiserror::Error)]
pub enum CvrError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("power flow diverged after {iterations} iterations (residual {residual:e})")]
    Divergence { iterations: usize, residual: f64 },
    #[error("measurement error: {0}")]
    Measurement(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("assembly error: {0}")]
    Assembly(String),
    #[error("routing error: {0}")]
    Routing(String),
    #[error(transparent)]
    Qp(#[from] cvr_qp::QpError),
}

impl CvrError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CvrError::Io { path: path.display().to_string(), source }
    }
}
