//! Desk-scale workloads over the shmpi communicator: breadth-first search,
//! bucket integer sort, 2D heat diffusion and D2Q9 lattice Boltzmann.
//!
//! Every workload is SPMD: all ranks call [`WorkloadSpec::run`] with the same
//! spec, and [`WorkloadSpec::validate`] checks the distributed output against
//! a single-process computation on rank 0.

use serde::{Deserialize, Serialize};
use shmpi_core::{Communicator, MpiError};
use thiserror::Error;

pub mod bfs;
mod halo;
mod harness;
pub mod heat2d;
pub mod intsort;
pub mod lbm;
pub mod partition;

pub use harness::{
    run_benchmark, BenchResult, CsvRow, HarnessOptions, RankRep, RepSummary, CSV_HEADER,
};

use bfs::BfsParams;
use heat2d::{HeatInit, HeatParams};
use intsort::SortParams;
use lbm::LbmParams;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Mpi(#[from] MpiError),
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("validation failed: {0}")]
    ValidationFailed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "workload", rename_all = "lowercase")]
pub enum WorkloadSpec {
    Bfs(BfsParams),
    IntSort(SortParams),
    Heat2d(HeatParams),
    Lbm(LbmParams),
}

/// One rank's share of a workload's output.
#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Parents(Vec<u64>),
    Keys(Vec<u64>),
    Field(Vec<f64>),
}

impl Output {
    pub fn as_bytes(&self) -> &[u8] {
        match self {
            Output::Parents(v) | Output::Keys(v) => bytemuck::cast_slice(v),
            Output::Field(v) => bytemuck::cast_slice(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validation {
    pub passed: bool,
    pub detail: String,
    /// CRC-32 of the whole output, concatenated in rank order.
    pub checksum: u32,
}

impl Validation {
    pub fn require(&self) -> Result<(), BenchError> {
        if self.passed {
            Ok(())
        } else {
            Err(BenchError::ValidationFailed(self.detail.clone()))
        }
    }
}

pub const WORKLOADS: [&str; 4] = ["bfs", "intsort", "heat2d", "lbm"];

impl WorkloadSpec {
    /// Desk-scale defaults: bfs scale 14 / edgefactor 16, intsort 2^22 keys
    /// in 0..2^24, heat2d 512x512 for 200 steps, lbm 128x128 for 200 steps.
    pub fn desk_default(name: &str, seed: u64) -> Option<WorkloadSpec> {
        Some(match name {
            "bfs" => WorkloadSpec::Bfs(BfsParams::random(14, 16, seed)),
            "intsort" => WorkloadSpec::IntSort(SortParams::random(1 << 22, 1 << 24, seed)),
            "heat2d" => WorkloadSpec::Heat2d(HeatParams::new(512, 512, 200, HeatInit::Random, seed)),
            "lbm" => WorkloadSpec::Lbm(LbmParams::new(128, 128, 200, seed)),
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            WorkloadSpec::Bfs(_) => "bfs",
            WorkloadSpec::IntSort(_) => "intsort",
            WorkloadSpec::Heat2d(_) => "heat2d",
            WorkloadSpec::Lbm(_) => "lbm",
        }
    }

    pub fn check(&self, ranks: u32) -> Result<(), BenchError> {
        if ranks == 0 {
            return Err(BenchError::InvalidSpec("zero ranks".into()));
        }
        match self {
            WorkloadSpec::Bfs(p) => p.check(ranks),
            WorkloadSpec::IntSort(p) => p.check(ranks),
            WorkloadSpec::Heat2d(p) => p.check(ranks),
            WorkloadSpec::Lbm(p) => p.check(ranks),
        }
    }

    /// One execution. Collective: every rank must call it.
    pub fn run(&self, comm: &mut Communicator) -> Result<Output, BenchError> {
        self.check(comm.size())?;
        Ok(match self {
            WorkloadSpec::Bfs(p) => Output::Parents(bfs::run(comm, p)?),
            WorkloadSpec::IntSort(p) => Output::Keys(intsort::run(comm, p)?),
            WorkloadSpec::Heat2d(p) => Output::Field(heat2d::run(comm, p)?),
            WorkloadSpec::Lbm(p) => Output::Field(lbm::run(comm, p)?),
        })
    }

    /// Collective check of a distributed output; every rank gets the verdict.
    pub fn validate(&self, comm: &mut Communicator, out: &Output) -> Result<Validation, BenchError> {
        match (self, out) {
            (WorkloadSpec::Bfs(p), Output::Parents(v)) => bfs::validate(comm, p, v),
            (WorkloadSpec::IntSort(p), Output::Keys(v)) => intsort::validate(comm, p, v),
            (WorkloadSpec::Heat2d(p), Output::Field(v)) => heat2d::validate(comm, p, v),
            (WorkloadSpec::Lbm(p), Output::Field(v)) => lbm::validate(comm, p, v),
            _ => Err(BenchError::InvalidSpec(format!(
                "output kind does not belong to {}",
                self.name()
            ))),
        }
    }
}

/// Gathers every rank's output bytes at rank 0, runs `check` there and
/// broadcasts the outcome.
pub(crate) fn verdict(
    comm: &mut Communicator,
    local: &[u8],
    check: impl FnOnce(Vec<Vec<u8>>) -> Result<String, String>,
) -> Result<Validation, BenchError> {
    let mut msg = Vec::new();
    if let Some(blocks) = comm.gather(0, local)? {
        let mut crc = crc32fast::Hasher::new();
        blocks.iter().for_each(|b| crc.update(b));
        let checksum = crc.finalize();
        let (passed, detail) = match check(blocks) {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        msg.push(passed as u8);
        msg.extend_from_slice(&checksum.to_le_bytes());
        msg.extend_from_slice(detail.as_bytes());
    }
    comm.bcast(0, &mut msg)?;
    if msg.len() < 5 {
        return Err(BenchError::ValidationFailed("truncated verdict".into()));
    }
    Ok(Validation {
        passed: msg[0] == 1,
        checksum: u32::from_le_bytes(msg[1..5].try_into().unwrap()),
        detail: String::from_utf8_lossy(&msg[5..]).into_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_round_trips_through_json() {
        for name in WORKLOADS {
            let spec = WorkloadSpec::desk_default(name, 7).unwrap();
            let text = serde_json::to_string(&spec).unwrap();
            assert!(text.contains(&format!("\"workload\":\"{name}\"")), "{text}");
            assert_eq!(serde_json::from_str::<WorkloadSpec>(&text).unwrap(), spec);
        }
        assert!(WorkloadSpec::desk_default("fft", 0).is_none());
    }
}
