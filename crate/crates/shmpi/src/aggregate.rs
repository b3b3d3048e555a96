//! Combines per-rank metrics files into one job summary.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use shmpi_core::mpi::METRICS_SCHEMA_VERSION;
use shmpi_core::RunMetrics;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("no metrics file for rank {0}")]
    MissingRankMetrics(u32),
    #[error("rank {rank} metrics use schema {found}, expected {expected}")]
    SchemaMismatch { rank: u32, found: u64, expected: u32 },
    #[error("rank {rank} metrics unreadable: {reason}")]
    Malformed { rank: u32, reason: String },
}

/// Job-level view of one run: traffic counters summed over ranks, times of
/// the slowest rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub ranks: u32,
    pub backend: String,
    pub payload_bytes_copied: u64,
    pub eager_bytes_copied: u64,
    pub rendezvous_bytes_copied: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
    pub barrier_count: u64,
    pub comm_time_ns: u64,
    pub compute_time_ns: u64,
    /// Job time: the longest rank wall time.
    pub wall_time_ns: u64,
    pub knobs: BTreeMap<String, String>,
}

pub fn summarize(ranks: &[RunMetrics]) -> RunSummary {
    let sum = |f: fn(&RunMetrics) -> u64| ranks.iter().map(f).sum();
    let max = |f: fn(&RunMetrics) -> u64| ranks.iter().map(f).max().unwrap_or(0);
    RunSummary {
        schema_version: METRICS_SCHEMA_VERSION,
        ranks: ranks.len() as u32,
        backend: ranks.first().map(|m| m.backend.clone()).unwrap_or_default(),
        payload_bytes_copied: sum(|m| m.payload_bytes_copied),
        eager_bytes_copied: sum(|m| m.eager_bytes_copied),
        rendezvous_bytes_copied: sum(|m| m.rendezvous_bytes_copied),
        messages_sent: sum(|m| m.messages_sent),
        messages_received: sum(|m| m.messages_received),
        barrier_count: max(|m| m.barrier_count),
        comm_time_ns: max(|m| m.comm_time_ns),
        compute_time_ns: max(|m| m.compute_time_ns),
        wall_time_ns: max(|m| m.wall_time_ns),
        knobs: ranks.first().map(|m| m.knobs.clone()).unwrap_or_default(),
    }
}

/// Reads `rank-<r>.json` for every rank in `0..n_ranks`.
pub fn read_rank_metrics(dir: &Path, n_ranks: u32) -> Result<Vec<RunMetrics>, AggregateError> {
    (0..n_ranks)
        .map(|rank| {
            let path = dir.join(RunMetrics::file_name(rank));
            let text = std::fs::read_to_string(&path)
                .map_err(|_| AggregateError::MissingRankMetrics(rank))?;
            parse(rank, &text)
        })
        .collect()
}

fn parse(rank: u32, text: &str) -> Result<RunMetrics, AggregateError> {
    let malformed = |reason: String| AggregateError::Malformed { rank, reason };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| malformed("no schema_version".into()))?;
    if found != METRICS_SCHEMA_VERSION as u64 {
        return Err(AggregateError::SchemaMismatch {
            rank,
            found,
            expected: METRICS_SCHEMA_VERSION,
        });
    }
    let m: RunMetrics = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    if m.rank != rank {
        return Err(malformed(format!("file claims rank {}", m.rank)));
    }
    Ok(m)
}

pub fn aggregate_metrics(dir: &Path, n_ranks: u32) -> Result<RunSummary, AggregateError> {
    Ok(summarize(&read_rank_metrics(dir, n_ranks)?))
}
