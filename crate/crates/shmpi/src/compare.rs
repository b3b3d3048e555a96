//! Benchmark jobs: the launcher side that spawns one job per
//! (workload, backend, ranks) cell, and the rank side that runs it.

use std::io::Write;
use std::path::Path;

use shmpi_bench::{run_benchmark, BenchError, BenchResult, CsvRow, HarnessOptions, WorkloadSpec, CSV_HEADER};
use shmpi_core::mpi::ENV_METRICS_DIR;
use shmpi_core::{Backend, Communicator};
use thiserror::Error;

use crate::launch::{launch, LaunchConfig, LaunchError, Program};

pub const ENV_BENCH_SPEC: &str = "SHMPI_BENCH_SPEC";
pub const ENV_BENCH_REPS: &str = "SHMPI_BENCH_REPS";
pub const ENV_BENCH_WARMUP: &str = "SHMPI_BENCH_WARMUP";
pub const BENCH_RESULT_FILE: &str = "bench.json";

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("{workload} on {ranks} ranks ({backend}): {source}")]
    Job {
        workload: String,
        backend: Backend,
        ranks: u32,
        #[source]
        source: LaunchError,
    },
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("benchmark result missing or unreadable: {0}")]
    MissingResult(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Launches one benchmark job and returns rank 0's result.
pub fn run_bench_job(
    base: &LaunchConfig,
    exe: &Path,
    spec: &WorkloadSpec,
    backend: Backend,
    ranks: u32,
    opts: HarnessOptions,
) -> Result<BenchResult, CompareError> {
    spec.check(ranks)?;
    let dir = tempfile::tempdir()?;
    let mut cfg = base.clone();
    cfg.n_ranks = ranks;
    cfg.backend = backend;
    cfg.metrics_dir = Some(dir.path().to_path_buf());
    cfg.program = Program::new(exe).args(["rank", "bench"]);
    cfg.env.extend([
        (ENV_BENCH_SPEC.to_string(), serde_json::to_string(spec).expect("spec serializes")),
        (ENV_BENCH_REPS.to_string(), opts.reps.to_string()),
        (ENV_BENCH_WARMUP.to_string(), u8::from(opts.warmup).to_string()),
    ]);
    launch(&cfg).map_err(|source| CompareError::Job {
        workload: spec.name().to_string(),
        backend,
        ranks,
        source,
    })?;
    let text = std::fs::read_to_string(dir.path().join(BENCH_RESULT_FILE))
        .map_err(|e| CompareError::MissingResult(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| CompareError::MissingResult(e.to_string()))
}

/// Runs every combination, in spec, backend, rank order. `progress` sees
/// each result as it completes. Failed validations are kept as results;
/// failed jobs abort the comparison.
pub fn run_comparison(
    base: &LaunchConfig,
    exe: &Path,
    specs: &[WorkloadSpec],
    backends: &[Backend],
    rank_counts: &[u32],
    opts: HarnessOptions,
    mut progress: impl FnMut(&BenchResult),
) -> Result<Vec<BenchResult>, CompareError> {
    let mut out = Vec::new();
    for spec in specs {
        for &backend in backends {
            for &ranks in rank_counts {
                let r = run_bench_job(base, exe, spec, backend, ranks, opts)?;
                progress(&r);
                out.push(r);
            }
        }
    }
    Ok(out)
}

pub fn write_csv<W: Write>(out: W, rows: &[CsvRow]) -> Result<(), CompareError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>, CompareError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(CompareError::MissingResult(format!("unexpected CSV header {header:?}")));
    }
    Ok(r.deserialize().collect::<Result<Vec<CsvRow>, _>>()?)
}

fn env_or<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

/// Rank side of a benchmark job.
pub fn bench_rank_main() -> Result<(), CompareError> {
    let text = std::env::var(ENV_BENCH_SPEC)
        .map_err(|_| CompareError::MissingResult(format!("{ENV_BENCH_SPEC} not set")))?;
    let spec: WorkloadSpec =
        serde_json::from_str(&text).map_err(|e| CompareError::MissingResult(e.to_string()))?;
    let opts = HarnessOptions {
        reps: env_or(ENV_BENCH_REPS, 5),
        warmup: env_or::<u8>(ENV_BENCH_WARMUP, 1) != 0,
    };
    let mut comm = Communicator::init_from_env().map_err(BenchError::from)?;
    let result = run_benchmark(&mut comm, &spec, opts)?;
    if let (Some(r), Ok(dir)) = (result, std::env::var(ENV_METRICS_DIR)) {
        let dir = Path::new(&dir);
        let tmp = dir.join(format!("{BENCH_RESULT_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&r).expect("result serializes"))?;
        std::fs::rename(tmp, dir.join(BENCH_RESULT_FILE))?;
    }
    comm.finalize().map_err(BenchError::from)?;
    Ok(())
}
