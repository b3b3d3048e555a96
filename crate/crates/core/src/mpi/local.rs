//! Runs a job with one thread per rank inside the current process.
//!
//! Each thread attaches its own mapping of the segment exactly as a separate
//! process would, so everything below the communicator behaves the same. Used
//! by tests and by callers that want a job without spawning processes.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use crate::segment::{create_segment_with, AttachOptions, SegmentConfig};

use super::{Backend, Communicator, JobConfig, MpiError, RunMetrics};

static NEXT_JOB: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct LocalJob {
    pub n_ranks: u32,
    pub backend: Backend,
    pub seg_size: u64,
    pub queue_capacity: u32,
    pub eager_threshold: u32,
    pub region_rows: u32,
    pub isend_barrier: bool,
    pub baseline_latency_ns: u64,
    pub op_timeout: Duration,
    pub barrier_timeout: Duration,
}

impl LocalJob {
    pub fn new(n_ranks: u32, backend: Backend) -> Self {
        LocalJob {
            n_ranks,
            backend,
            seg_size: 64 << 20,
            queue_capacity: 64,
            eager_threshold: 256,
            region_rows: 16_384,
            isend_barrier: false,
            baseline_latency_ns: 0,
            op_timeout: Duration::from_secs(60),
            barrier_timeout: Duration::from_secs(60),
        }
    }

    pub fn seg_size(mut self, bytes: u64) -> Self {
        self.seg_size = bytes;
        self
    }

    pub fn queue_capacity(mut self, entries: u32) -> Self {
        self.queue_capacity = entries;
        self
    }

    pub fn eager_threshold(mut self, bytes: u32) -> Self {
        self.eager_threshold = bytes;
        self
    }

    pub fn isend_barrier(mut self, on: bool) -> Self {
        self.isend_barrier = on;
        self
    }

    pub fn timeouts(mut self, op: Duration, barrier: Duration) -> Self {
        self.op_timeout = op;
        self.barrier_timeout = barrier;
        self
    }

    /// Runs `body` on every rank and returns each rank's result with its
    /// finalize metrics, indexed by rank.
    pub fn run<R, F>(&self, body: F) -> Result<Vec<(R, RunMetrics)>, MpiError>
    where
        R: Send,
        F: Fn(&mut Communicator) -> Result<R, MpiError> + Sync,
    {
        let job_id = format!(
            "local-{}-{}",
            std::process::id(),
            NEXT_JOB.fetch_add(1, Ordering::Relaxed)
        );
        let probe = JobConfig::new(&job_id, 0, self.n_ranks, self.backend);
        let _segment = create_segment_with(
            SegmentConfig::new(probe.segment_name(), self.n_ranks)
                .with_total_size(self.seg_size)
                .with_queue_capacity(self.queue_capacity)
                .with_eager_threshold(self.eager_threshold)
                .with_region_rows(self.region_rows),
            AttachOptions::default(),
        )?;
        let body = &body;
        let results: Vec<Result<(R, RunMetrics), MpiError>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..self.n_ranks)
                .map(|rank| {
                    let mut cfg = JobConfig::new(&job_id, rank, self.n_ranks, self.backend);
                    cfg.isend_barrier = self.isend_barrier;
                    cfg.baseline_latency_ns = self.baseline_latency_ns;
                    cfg.op_timeout = self.op_timeout;
                    cfg.barrier_timeout = self.barrier_timeout;
                    std::thread::Builder::new()
                        .name(format!("rank-{rank}"))
                        .spawn_scoped(s, move || {
                            let mut comm = Communicator::init(cfg)?;
                            let out = body(&mut comm)?;
                            let metrics = comm.finalize()?;
                            Ok((out, metrics))
                        })
                        .expect("spawn rank thread")
                })
                .collect();
            handles
                .into_iter()
                .map(|h| match h.join() {
                    Ok(r) => r,
                    Err(panic) => std::panic::resume_unwind(panic),
                })
                .collect()
        });
        results.into_iter().collect()
    }
}
