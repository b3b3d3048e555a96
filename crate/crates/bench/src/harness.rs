//! Repetition loop, per-repetition accounting and the comparison CSV rows.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use shmpi_core::{Communicator, RunMetrics};

use crate::{BenchError, Validation, WorkloadSpec};

pub const CSV_HEADER: [&str; 9] = [
    "workload",
    "backend",
    "ranks",
    "rep",
    "total_ns",
    "comm_ns",
    "bytes_copied",
    "msgs",
    "validation",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HarnessOptions {
    pub reps: u32,
    /// Run once before measuring and discard the result.
    pub warmup: bool,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        HarnessOptions {
            reps: 5,
            warmup: true,
        }
    }
}

/// One rank's view of one measured repetition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRep {
    pub total_ns: u64,
    pub comm_ns: u64,
    pub bytes_copied: u64,
    pub messages_sent: u64,
    /// CRC-32 of this rank's output.
    pub output_crc: u32,
}

/// One repetition over the whole job: slowest rank's times, summed traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepSummary {
    pub rep: u32,
    pub total_ns: u64,
    pub comm_ns: u64,
    pub bytes_copied: u64,
    pub msgs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub workload: String,
    pub backend: String,
    pub ranks: u32,
    pub spec: WorkloadSpec,
    pub reps: Vec<RepSummary>,
    /// `per_rank[r][k]` is rank `r` in repetition `k`.
    pub per_rank: Vec<Vec<RankRep>>,
    /// Each rank's metrics at the end of the measured repetitions.
    pub rank_metrics: Vec<RunMetrics>,
    pub validation: Validation,
}

/// One line of the comparison CSV. Field order matches [`CSV_HEADER`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvRow {
    pub workload: String,
    pub backend: String,
    pub ranks: u32,
    pub rep: u32,
    pub total_ns: u64,
    pub comm_ns: u64,
    pub bytes_copied: u64,
    pub msgs: u64,
    pub validation: String,
}

impl BenchResult {
    /// Only validated results may be compared.
    pub fn comparable(&self) -> bool {
        self.validation.passed
    }

    pub fn total_time_ns(&self) -> u64 {
        median(self.reps.iter().map(|r| r.total_ns))
    }

    pub fn comm_time_ns(&self) -> u64 {
        median(self.reps.iter().map(|r| r.comm_ns))
    }

    pub fn csv_rows(&self) -> Vec<CsvRow> {
        let status = if self.validation.passed { "pass" } else { "fail" };
        self.reps
            .iter()
            .map(|r| CsvRow {
                workload: self.workload.clone(),
                backend: self.backend.clone(),
                ranks: self.ranks,
                rep: r.rep,
                total_ns: r.total_ns,
                comm_ns: r.comm_ns,
                bytes_copied: r.bytes_copied,
                msgs: r.msgs,
                validation: status.to_string(),
            })
            .collect()
    }
}

/// Lower median; zero for no samples.
fn median(values: impl Iterator<Item = u64>) -> u64 {
    let mut v: Vec<u64> = values.collect();
    v.sort_unstable();
    v.get(v.len().saturating_sub(1) / 2).copied().unwrap_or(0)
}

#[derive(Serialize, Deserialize)]
struct RankReport {
    reps: Vec<RankRep>,
    metrics: RunMetrics,
}

/// Runs `spec` `opts.reps` times with a barrier before each repetition, then
/// validates the last output. Collective; the result is returned on rank 0.
///
/// Validation also fails if any rank's output changed between repetitions.
pub fn run_benchmark(
    comm: &mut Communicator,
    spec: &WorkloadSpec,
    opts: HarnessOptions,
) -> Result<Option<BenchResult>, BenchError> {
    spec.check(comm.size())?;
    if opts.reps == 0 {
        return Err(BenchError::InvalidSpec("zero repetitions".into()));
    }
    if opts.warmup {
        comm.barrier()?;
        spec.run(comm)?;
    }
    let mut reps = Vec::with_capacity(opts.reps as usize);
    let mut last = None;
    for _ in 0..opts.reps {
        comm.barrier()?;
        let before = comm.counters();
        let t0 = Instant::now();
        let out = spec.run(comm)?;
        let total_ns = t0.elapsed().as_nanos() as u64;
        let d = comm.counters() - before;
        reps.push(RankRep {
            total_ns,
            comm_ns: d.comm_time_ns,
            bytes_copied: d.payload_bytes_copied(),
            messages_sent: d.messages_sent,
            output_crc: crc32fast::hash(out.as_bytes()),
        });
        last = Some(out);
    }
    let metrics = comm.metrics();
    let mut validation = spec.validate(comm, &last.expect("at least one repetition"))?;
    let report = serde_json::to_vec(&RankReport { reps, metrics }).expect("report serializes");
    let Some(blocks) = comm.gather(0, &report)? else {
        return Ok(None);
    };
    let reports = blocks
        .iter()
        .map(|b| serde_json::from_slice::<RankReport>(b))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| BenchError::ValidationFailed(format!("unreadable rank report: {e}")))?;
    if let Some(r) = reports
        .iter()
        .position(|rr| rr.reps.windows(2).any(|w| w[0].output_crc != w[1].output_crc))
    {
        validation.passed = false;
        validation.detail = format!("rank {r} output changed between repetitions; {}", validation.detail);
    }
    let summaries = (0..opts.reps as usize)
        .map(|k| {
            let at = |r: &RankReport| r.reps[k];
            RepSummary {
                rep: k as u32,
                total_ns: reports.iter().map(|r| at(r).total_ns).max().unwrap_or(0),
                comm_ns: reports.iter().map(|r| at(r).comm_ns).max().unwrap_or(0),
                bytes_copied: reports.iter().map(|r| at(r).bytes_copied).sum(),
                msgs: reports.iter().map(|r| at(r).messages_sent).sum(),
            }
        })
        .collect();
    Ok(Some(BenchResult {
        workload: spec.name().to_string(),
        backend: comm.backend().to_string(),
        ranks: comm.size(),
        spec: spec.clone(),
        reps: summaries,
        per_rank: reports.iter().map(|r| r.reps.clone()).collect(),
        rank_metrics: reports.into_iter().map(|r| r.metrics).collect(),
        validation,
    }))
}
