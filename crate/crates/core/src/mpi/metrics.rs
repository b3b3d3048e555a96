//! Per-rank counters and the metrics record written at finalize.

use std::collections::BTreeMap;
use std::ops::Sub;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Live counters of one communicator. All fields only ever grow.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub eager_bytes_copied: u64,
    pub rendezvous_bytes_copied: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
    pub comm_time_ns: u64,
    pub barrier_count: u64,
}

impl Counters {
    pub fn payload_bytes_copied(&self) -> u64 {
        self.eager_bytes_copied + self.rendezvous_bytes_copied
    }
}

impl Sub for Counters {
    type Output = Counters;

    fn sub(self, earlier: Counters) -> Counters {
        Counters {
            eager_bytes_copied: self.eager_bytes_copied - earlier.eager_bytes_copied,
            rendezvous_bytes_copied: self.rendezvous_bytes_copied
                - earlier.rendezvous_bytes_copied,
            messages_sent: self.messages_sent - earlier.messages_sent,
            messages_received: self.messages_received - earlier.messages_received,
            comm_time_ns: self.comm_time_ns - earlier.comm_time_ns,
            barrier_count: self.barrier_count - earlier.barrier_count,
        }
    }
}

/// The per-rank record emitted at finalize as one JSON object.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub schema_version: u32,
    pub rank: u32,
    pub backend: String,
    pub payload_bytes_copied: u64,
    pub eager_bytes_copied: u64,
    pub rendezvous_bytes_copied: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
    pub comm_time_ns: u64,
    pub compute_time_ns: u64,
    pub wall_time_ns: u64,
    pub barrier_count: u64,
    /// Job knobs as the rank saw them.
    #[serde(default)]
    pub knobs: BTreeMap<String, String>,
}

impl RunMetrics {
    pub fn from_counters(rank: u32, backend: &str, c: &Counters, wall: Duration) -> Self {
        let wall_time_ns = wall.as_nanos() as u64;
        RunMetrics {
            schema_version: METRICS_SCHEMA_VERSION,
            rank,
            backend: backend.to_string(),
            payload_bytes_copied: c.payload_bytes_copied(),
            eager_bytes_copied: c.eager_bytes_copied,
            rendezvous_bytes_copied: c.rendezvous_bytes_copied,
            messages_sent: c.messages_sent,
            messages_received: c.messages_received,
            comm_time_ns: c.comm_time_ns,
            compute_time_ns: wall_time_ns.saturating_sub(c.comm_time_ns),
            wall_time_ns,
            barrier_count: c.barrier_count,
            knobs: BTreeMap::new(),
        }
    }

    pub fn file_name(rank: u32) -> String {
        format!("rank-{rank}.json")
    }
}

/// Time spent inside communicator calls. Nested calls (a collective built
/// from sends) are only timed at the outermost level.
#[derive(Debug, Default)]
pub(crate) struct CommClock {
    depth: u32,
    entered: Option<Instant>,
}

impl CommClock {
    pub fn enter(&mut self) {
        if self.depth == 0 {
            self.entered = Some(Instant::now());
        }
        self.depth += 1;
    }

    /// Returns the nanoseconds to charge when the outermost call ends.
    pub fn leave(&mut self) -> u64 {
        debug_assert!(self.depth > 0);
        self.depth -= 1;
        match (self.depth, self.entered.take()) {
            (0, Some(t)) => t.elapsed().as_nanos() as u64,
            (_, t) => {
                self.entered = t;
                0
            }
        }
    }
}
