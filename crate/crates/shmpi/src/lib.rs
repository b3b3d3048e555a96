//! Launcher for shmpi jobs: segment setup, rank supervision, metrics
//! aggregation and benchmark comparisons.

pub mod aggregate;
pub mod clean;
pub mod compare;
pub mod launch;
pub mod probe;

pub use aggregate::{aggregate_metrics, AggregateError, RunSummary};
pub use compare::{read_csv, run_bench_job, run_comparison, write_csv, CompareError};
pub use launch::{launch, ExitReport, LaunchConfig, LaunchError, Program};
