//! Sparse convex quadratic programming.
//!
//! Problems are assembled with [`QpBuilder`] and solved with [`solve`], an
//! operator-splitting method followed by an active-set polish. Every returned
//! solution can be audited with [`check_kkt`], which recomputes the
//! optimality residuals from the raw problem data.

mod kkt;
mod ldl;
mod problem;
mod solver;
mod sparse;
mod text;

pub use kkt::{check_kkt, check_kkt_raw, KktReport};
pub use problem::{QpBuilder, QpProblem};
pub use solver::{solve, solve_with, QpSolution, QpStatus, SolverSettings};
pub use sparse::SparseMatrix;
pub use text::{parse_qp, write_qp};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum QpError {
    #[error("KKT factorization broke down at pivot {0}")]
    Factorization(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("cost matrix is not positive semidefinite (variable {0})")]
    NotPsd(usize),
    #[error("parse error: {0}")]
    Parse(String),
}
