//! Scenario runner behind the `cvr` binary: daily benchmarks of the
//! dispatch strategies, single-point convergence sweeps and traces, and
//! their CSV reports.

pub mod benchmark;
pub mod commands;
pub mod config;
pub mod report;
pub mod scenario;
