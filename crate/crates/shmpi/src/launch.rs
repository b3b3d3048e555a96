//! Creates the job segment, spawns one process per rank and supervises them.

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::{Child, Command, ExitStatus};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use shmpi_core::mpi::ENV_RANK;
use shmpi_core::segment::{create_segment_with, segment_exists, AttachOptions};
use shmpi_core::sync::PollingPolicy;
use shmpi_core::{Backend, JobConfig, RunMetrics, SegmentConfig, SegmentError};
use thiserror::Error;

use crate::aggregate::{read_rank_metrics, summarize, AggregateError, RunSummary};

const POLL_INTERVAL: Duration = Duration::from_millis(2);

#[derive(Debug, Error)]
pub enum LaunchError {
    #[error("invalid job config: {0}")]
    InvalidConfig(String),
    #[error("could not spawn rank {rank}: {source}")]
    SpawnFailed {
        rank: u32,
        #[source]
        source: std::io::Error,
    },
    #[error("rank {rank} failed: {}", describe(*code, *signal))]
    RankCrashed {
        rank: u32,
        code: Option<i32>,
        signal: Option<i32>,
    },
    #[error("job did not finish within {0:?}")]
    JobTimeout(Duration),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Metrics(#[from] AggregateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn describe(code: Option<i32>, signal: Option<i32>) -> String {
    match (code, signal) {
        (Some(c), _) => format!("exit code {c}"),
        (None, Some(s)) => format!("killed by signal {s}"),
        (None, None) => "unknown status".into(),
    }
}

/// The executable every rank runs, with its arguments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub path: PathBuf,
    pub args: Vec<OsString>,
}

impl Program {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Program {
            path: path.into(),
            args: Vec::new(),
        }
    }

    pub fn arg(mut self, a: impl Into<OsString>) -> Self {
        self.args.push(a.into());
        self
    }

    pub fn args<I: IntoIterator<Item = S>, S: Into<OsString>>(mut self, args: I) -> Self {
        self.args.extend(args.into_iter().map(Into::into));
        self
    }
}

#[derive(Debug, Clone)]
pub struct LaunchConfig {
    pub n_ranks: u32,
    pub backend: Backend,
    pub seg_size: u64,
    pub queue_capacity: u32,
    pub eager_threshold: u32,
    pub region_rows: u32,
    pub program: Program,
    /// Whole-job wall clock limit.
    pub timeout: Duration,
    /// Per-operation timeout inside ranks.
    pub op_timeout: Duration,
    /// Where ranks write metrics. A temporary directory is used when unset.
    pub metrics_dir: Option<PathBuf>,
    pub prefault: bool,
    pub isend_barrier: bool,
    pub baseline_latency_ns: u64,
    pub spin_limit: Option<u32>,
    /// Extra variables passed to every rank.
    pub env: Vec<(String, String)>,
}

impl LaunchConfig {
    pub fn new(n_ranks: u32, backend: Backend, program: Program) -> Self {
        LaunchConfig {
            n_ranks,
            backend,
            seg_size: 256 << 20,
            queue_capacity: 64,
            eager_threshold: 256,
            region_rows: 16_384,
            program,
            timeout: Duration::from_secs(600),
            op_timeout: Duration::from_secs(120),
            metrics_dir: None,
            prefault: false,
            isend_barrier: false,
            baseline_latency_ns: 0,
            spin_limit: None,
            env: Vec::new(),
        }
    }

    pub fn env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.env.push((key.into(), value.into()));
        self
    }

    fn segment_config(&self, name: String) -> SegmentConfig {
        SegmentConfig::new(name, self.n_ranks)
            .with_total_size(self.seg_size)
            .with_queue_capacity(self.queue_capacity)
            .with_eager_threshold(self.eager_threshold)
            .with_region_rows(self.region_rows)
    }

    /// Checks everything that can be checked before any process exists.
    pub fn validate(&self) -> Result<(), LaunchError> {
        if self.n_ranks == 0 {
            return Err(LaunchError::InvalidConfig("n_ranks must be at least 1".into()));
        }
        if self.timeout.is_zero() {
            return Err(LaunchError::InvalidConfig("timeout must be positive".into()));
        }
        self.segment_config("shmpi.validate".into())
            .validate()
            .map_err(|e| LaunchError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    fn job_config(&self, job_id: &str, metrics_dir: PathBuf) -> JobConfig {
        let mut cfg = JobConfig::new(job_id, 0, self.n_ranks, self.backend);
        cfg.metrics_dir = Some(metrics_dir);
        cfg.isend_barrier = self.isend_barrier;
        cfg.baseline_latency_ns = self.baseline_latency_ns;
        cfg.prefault = self.prefault;
        cfg.op_timeout = self.op_timeout;
        cfg.barrier_timeout = self.op_timeout;
        cfg.polling = PollingPolicy {
            spin_limit: self.spin_limit.unwrap_or(cfg.polling.spin_limit),
            ..cfg.polling
        };
        cfg
    }
}

/// Outcome of a job in which every rank exited successfully.
#[derive(Debug, Clone)]
pub struct ExitReport {
    pub job_id: String,
    pub elapsed: Duration,
    pub summary: RunSummary,
    pub per_rank: Vec<RunMetrics>,
}

static NEXT_JOB: AtomicU64 = AtomicU64::new(0);

pub fn new_job_id() -> String {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.subsec_nanos())
        .unwrap_or(0);
    format!(
        "{}-{}-{:08x}",
        std::process::id(),
        NEXT_JOB.fetch_add(1, Ordering::Relaxed),
        nanos
    )
}

/// Kills and reaps every child still running when dropped.
struct Ranks(Vec<Option<Child>>);

impl Ranks {
    fn kill_all(&mut self) {
        for child in self.0.iter_mut().flatten() {
            let _ = child.kill();
        }
        for child in self.0.iter_mut() {
            if let Some(mut c) = child.take() {
                let _ = c.wait();
            }
        }
    }
}

impl Drop for Ranks {
    fn drop(&mut self) {
        self.kill_all();
    }
}

fn crashed(rank: u32, status: ExitStatus) -> LaunchError {
    #[cfg(unix)]
    let signal = std::os::unix::process::ExitStatusExt::signal(&status);
    #[cfg(not(unix))]
    let signal = None;
    LaunchError::RankCrashed {
        rank,
        code: status.code(),
        signal,
    }
}

/// Runs one job to completion.
///
/// On success the metrics of all ranks are aggregated. On any rank failure
/// or timeout every remaining rank is killed. The segment is removed in all
/// cases.
pub fn launch(cfg: &LaunchConfig) -> Result<ExitReport, LaunchError> {
    cfg.validate()?;
    let job_id = new_job_id();
    let scratch;
    let metrics_dir = match &cfg.metrics_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            d.clone()
        }
        None => {
            scratch = tempfile::tempdir()?;
            scratch.path().to_path_buf()
        }
    };
    let job = cfg.job_config(&job_id, metrics_dir.clone());
    let segment = create_segment_with(
        cfg.segment_config(job.segment_name()),
        AttachOptions {
            prefault: cfg.prefault,
            ..AttachOptions::default()
        },
    )?;
    let started = Instant::now();
    let mut ranks = Ranks(Vec::with_capacity(cfg.n_ranks as usize));
    for rank in 0..cfg.n_ranks {
        let mut cmd = Command::new(&cfg.program.path);
        cmd.args(&cfg.program.args)
            .envs(job.job_env())
            .env(ENV_RANK, rank.to_string())
            .envs(cfg.env.iter().map(|(k, v)| (k, v)));
        match cmd.spawn() {
            Ok(child) => ranks.0.push(Some(child)),
            Err(source) => return Err(LaunchError::SpawnFailed { rank, source }),
        }
    }
    let deadline = started + cfg.timeout;
    loop {
        let mut running = 0;
        for (rank, slot) in ranks.0.iter_mut().enumerate() {
            let Some(child) = slot else { continue };
            match child.try_wait()? {
                Some(status) if status.success() => *slot = None,
                Some(status) => {
                    *slot = None;
                    return Err(crashed(rank as u32, status));
                }
                None => running += 1,
            }
        }
        if running == 0 {
            break;
        }
        if Instant::now() >= deadline {
            return Err(LaunchError::JobTimeout(cfg.timeout));
        }
        std::thread::sleep(POLL_INTERVAL);
    }
    let elapsed = started.elapsed();
    drop(segment);
    debug_assert!(!segment_exists(&job.segment_name()));
    let per_rank = read_rank_metrics(&metrics_dir, cfg.n_ranks)?;
    Ok(ExitReport {
        job_id,
        elapsed,
        summary: summarize(&per_rank),
        per_rank,
    })
}
