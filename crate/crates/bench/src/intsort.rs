//! Bucket sort: local histogram, global histogram by allreduce, contiguous
//! bucket ranges assigned to ranks, one all-to-all of shared buffers, then a
//! local sort.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shmpi_core::{Communicator, ReduceOp};

use crate::partition::block;
use crate::{verdict, BenchError, Validation};

pub const BUCKETS: u64 = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KeySource {
    /// `count` uniform keys in `0..range`.
    Random { count: u64, range: u64 },
    Explicit(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SortParams {
    pub keys: KeySource,
    pub seed: u64,
}

impl SortParams {
    pub fn random(count: u64, range: u64, seed: u64) -> Self {
        SortParams {
            keys: KeySource::Random { count, range },
            seed,
        }
    }

    pub fn explicit(keys: Vec<u64>) -> Self {
        SortParams {
            keys: KeySource::Explicit(keys),
            seed: 0,
        }
    }

    pub fn count(&self) -> u64 {
        match &self.keys {
            KeySource::Random { count, .. } => *count,
            KeySource::Explicit(k) => k.len() as u64,
        }
    }

    /// Exclusive upper bound on key values.
    pub fn range(&self) -> u64 {
        match &self.keys {
            KeySource::Random { range, .. } => *range,
            KeySource::Explicit(k) => k.iter().max().map_or(1, |m| m + 1),
        }
    }

    /// Keys `first..first + len` of the global input sequence.
    pub fn keys(&self, first: u64, len: u64) -> Vec<u64> {
        match &self.keys {
            KeySource::Random { range, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_word_pos(2 * first as u128);
                (0..len).map(|_| rng.next_u64() % range).collect()
            }
            KeySource::Explicit(k) => k[first as usize..(first + len) as usize].to_vec(),
        }
    }

    pub fn check(&self, ranks: u32) -> Result<(), BenchError> {
        let n = self.count();
        if n == 0 || n % ranks as u64 != 0 {
            return Err(BenchError::InvalidSpec(format!(
                "{n} keys not divisible over {ranks} ranks"
            )));
        }
        if let KeySource::Random { range, .. } = self.keys {
            if range == 0 || range > 1 << 48 {
                return Err(BenchError::InvalidSpec(format!("key range {range} outside 1..=2^48")));
            }
        }
        Ok(())
    }
}

fn bucket_of(key: u64, buckets: u64, range: u64) -> usize {
    (key as u128 * buckets as u128 / range as u128) as usize
}

/// Maps each bucket to a destination rank so that ranks get contiguous,
/// roughly equal key ranges.
fn bucket_owners(hist: &[u64], ranks: u32) -> Vec<u32> {
    let total: u64 = hist.iter().sum();
    let mut before = 0u64;
    hist.iter()
        .map(|&h| {
            let r = (before as u128 * ranks as u128 / total.max(1) as u128) as u32;
            before += h;
            r
        })
        .collect()
}

/// Sorts the distributed input and returns this rank's share of the output.
pub fn run(comm: &mut Communicator, p: &SortParams) -> Result<Vec<u64>, BenchError> {
    let (rank, size) = (comm.rank(), comm.size());
    let mine = block(p.count(), size, rank);
    let keys = p.keys(mine.start, mine.end - mine.start);
    let range = p.range();
    let buckets = BUCKETS.min(range);
    let mut hist = vec![0u64; buckets as usize];
    for &k in &keys {
        hist[bucket_of(k, buckets, range)] += 1;
    }
    let global = comm.allreduce(&hist, ReduceOp::Sum)?;
    let dest = bucket_owners(&global, size);
    let mut counts = vec![0usize; size as usize];
    for &k in &keys {
        counts[dest[bucket_of(k, buckets, range)] as usize] += 1;
    }
    let mut parts = counts
        .iter()
        .map(|&c| comm.alloc_shared(c * 8))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cursor = vec![0usize; size as usize];
    for &k in &keys {
        let d = dest[bucket_of(k, buckets, range)] as usize;
        parts[d].as_mut_slice()[cursor[d]..cursor[d] + 8].copy_from_slice(&k.to_le_bytes());
        cursor[d] += 8;
    }
    drop(keys);
    let arrived = comm.alltoall_shared(parts)?;
    let mut out = Vec::with_capacity(arrived.iter().map(|a| a.len() / 8).sum());
    for part in &arrived {
        out.extend(
            part.as_slice()
                .chunks_exact(8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap())),
        );
    }
    drop(arrived);
    out.sort_unstable();
    Ok(out)
}

pub fn validate(comm: &mut Communicator, p: &SortParams, sorted: &[u64]) -> Result<Validation, BenchError> {
    verdict(comm, bytemuck::cast_slice(sorted), |blocks| {
        let got: Vec<u64> = bytemuck::pod_collect_to_vec(&blocks.concat());
        let mut expect = p.keys(0, p.count());
        expect.sort_unstable();
        if got.len() != expect.len() {
            return Err(format!("{} keys out, {} in", got.len(), expect.len()));
        }
        match got.iter().zip(&expect).position(|(a, b)| a != b) {
            None => Ok(format!("{} keys sorted", got.len())),
            Some(i) => Err(format!("output differs at {i}: {} vs {}", got[i], expect[i])),
        }
    })
}
