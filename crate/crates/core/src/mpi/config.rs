//! Per-rank job configuration and the environment contract with the launcher.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use crate::segment::job_segment_name;
use crate::sync::{barrier_timeout_from_env, PollingPolicy, ENV_BARRIER_TIMEOUT_MS, ENV_SPIN_LIMIT};

use super::MpiError;

pub const ENV_JOB: &str = "SHMPI_JOB";
pub const ENV_RANK: &str = "SHMPI_RANK";
pub const ENV_NRANKS: &str = "SHMPI_NRANKS";
pub const ENV_BACKEND: &str = "SHMPI_BACKEND";
pub const ENV_METRICS_DIR: &str = "SHMPI_METRICS_DIR";
pub const ENV_ISEND_BARRIER: &str = "SHMPI_ISEND_BARRIER";
pub const ENV_BASELINE_LATENCY_NS: &str = "SHMPI_BASELINE_LATENCY_NS";
pub const ENV_PREFAULT: &str = "SHMPI_PREFAULT";
pub const ENV_TIMEOUT_MS: &str = "SHMPI_TIMEOUT_MS";

pub const DEFAULT_OP_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Backend {
    /// Descriptor exchange with by-reference delivery.
    PointerShared,
    /// Two-copy staging through a shared bounce buffer.
    CopyBaseline,
}

impl Backend {
    pub const ALL: [Backend; 2] = [Backend::PointerShared, Backend::CopyBaseline];

    pub fn as_str(self) -> &'static str {
        match self {
            Backend::PointerShared => "pointer",
            Backend::CopyBaseline => "copy",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = MpiError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pointer" | "pointer_shared" | "pointer-shared" => Ok(Backend::PointerShared),
            "copy" | "copy_baseline" | "copy-baseline" | "baseline" => Ok(Backend::CopyBaseline),
            other => Err(MpiError::Config(format!("unknown backend '{other}'"))),
        }
    }
}

/// Everything one rank needs to join a job.
#[derive(Debug, Clone, PartialEq)]
pub struct JobConfig {
    pub job_id: String,
    pub rank: u32,
    pub n_ranks: u32,
    pub backend: Backend,
    pub metrics_dir: Option<PathBuf>,
    /// Completing an isend also runs a communicator barrier.
    pub isend_barrier: bool,
    /// Busy-wait injected per baseline send.
    pub baseline_latency_ns: u64,
    pub prefault: bool,
    pub op_timeout: Duration,
    pub barrier_timeout: Duration,
    pub polling: PollingPolicy,
}

impl JobConfig {
    pub fn new(job_id: impl Into<String>, rank: u32, n_ranks: u32, backend: Backend) -> Self {
        JobConfig {
            job_id: job_id.into(),
            rank,
            n_ranks,
            backend,
            metrics_dir: None,
            isend_barrier: false,
            baseline_latency_ns: 0,
            prefault: false,
            op_timeout: DEFAULT_OP_TIMEOUT,
            barrier_timeout: crate::sync::DEFAULT_BARRIER_TIMEOUT,
            polling: PollingPolicy::default(),
        }
    }

    pub fn segment_name(&self) -> String {
        job_segment_name(&self.job_id)
    }

    /// Reads the variables the launcher sets for each rank.
    pub fn from_env() -> Result<Self, MpiError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let required = |k: &str| var(k).ok_or_else(|| MpiError::Config(format!("{k} is not set")));
        let parse_u = |k: &str, v: String| -> Result<u64, MpiError> {
            v.parse()
                .map_err(|_| MpiError::Config(format!("{k}='{v}' is not an unsigned integer")))
        };
        let flag = |k: &str| var(k).is_some_and(|v| v != "0" && v != "false");

        let job_id = required(ENV_JOB)?;
        let rank = parse_u(ENV_RANK, required(ENV_RANK)?)? as u32;
        let n_ranks = parse_u(ENV_NRANKS, required(ENV_NRANKS)?)? as u32;
        let backend = match var(ENV_BACKEND) {
            Some(b) => b.parse()?,
            None => Backend::PointerShared,
        };
        let mut cfg = JobConfig::new(job_id, rank, n_ranks, backend);
        cfg.metrics_dir = var(ENV_METRICS_DIR).map(PathBuf::from);
        cfg.isend_barrier = flag(ENV_ISEND_BARRIER);
        cfg.prefault = flag(ENV_PREFAULT);
        if let Some(v) = var(ENV_BASELINE_LATENCY_NS) {
            cfg.baseline_latency_ns = parse_u(ENV_BASELINE_LATENCY_NS, v)?;
        }
        if let Some(v) = var(ENV_TIMEOUT_MS) {
            cfg.op_timeout = Duration::from_millis(parse_u(ENV_TIMEOUT_MS, v)?);
        }
        cfg.barrier_timeout = barrier_timeout_from_env();
        cfg.polling = PollingPolicy::from_env();
        Ok(cfg)
    }

    /// Job-wide variables for a child rank; the caller adds [`ENV_RANK`].
    pub fn job_env(&self) -> Vec<(&'static str, String)> {
        let mut env = vec![
            (ENV_JOB, self.job_id.clone()),
            (ENV_NRANKS, self.n_ranks.to_string()),
            (ENV_BACKEND, self.backend.as_str().to_string()),
            (ENV_ISEND_BARRIER, u8::from(self.isend_barrier).to_string()),
            (ENV_BASELINE_LATENCY_NS, self.baseline_latency_ns.to_string()),
            (ENV_PREFAULT, u8::from(self.prefault).to_string()),
            (ENV_TIMEOUT_MS, self.op_timeout.as_millis().to_string()),
            (ENV_BARRIER_TIMEOUT_MS, self.barrier_timeout.as_millis().to_string()),
            (ENV_SPIN_LIMIT, self.polling.spin_limit.to_string()),
        ];
        if let Some(dir) = &self.metrics_dir {
            env.push((ENV_METRICS_DIR, dir.display().to_string()));
        }
        env
    }
}
