//! Explicit Jacobi iteration of the 2D heat equation on a row-decomposed
//! grid with insulated edges.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shmpi_core::Communicator;

use crate::halo::{self, exchange, Neighbors};
use crate::partition::block;
use crate::{verdict, BenchError, Validation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HeatInit {
    Uniform(f64),
    /// One hot cell at `(nx / 2, ny / 2)`, zero elsewhere.
    HotCenter(f64),
    /// Seeded uniform values in `[0, 1)`.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatParams {
    pub nx: usize,
    pub ny: usize,
    pub steps: u32,
    pub alpha: f64,
    pub init: HeatInit,
    pub seed: u64,
}

impl HeatParams {
    pub fn new(nx: usize, ny: usize, steps: u32, init: HeatInit, seed: u64) -> Self {
        HeatParams {
            nx,
            ny,
            steps,
            alpha: 0.1,
            init,
            seed,
        }
    }

    /// Initial values of global row `y`.
    pub fn initial_row(&self, y: usize) -> Vec<f64> {
        match self.init {
            HeatInit::Uniform(t) => vec![t; self.nx],
            HeatInit::HotCenter(t) => {
                let mut row = vec![0.0; self.nx];
                if y == self.ny / 2 {
                    row[self.nx / 2] = t;
                }
                row
            }
            HeatInit::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_word_pos(2 * (y * self.nx) as u128);
                (0..self.nx).map(|_| unit(rng.next_u64())).collect()
            }
        }
    }

    pub fn check(&self, ranks: u32) -> Result<(), BenchError> {
        if self.nx == 0 || self.ny < ranks as usize {
            return Err(BenchError::InvalidSpec(format!(
                "{}x{} grid cannot be split into {ranks} row blocks",
                self.nx, self.ny
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 0.25) {
            return Err(BenchError::InvalidSpec(format!("alpha {} is unstable", self.alpha)));
        }
        Ok(())
    }
}

pub(crate) fn unit(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// One Jacobi sweep over the rows of `u`, with `north` and `south` as the
/// rows just outside the block. Edge columns reflect.
fn sweep(north: &[f64], u: &[f64], south: &[f64], out: &mut [f64], nx: usize, alpha: f64) {
    let rows = u.len() / nx;
    for i in 0..rows {
        let n = if i == 0 { north } else { &u[(i - 1) * nx..i * nx] };
        let s = if i + 1 == rows { south } else { &u[(i + 1) * nx..(i + 2) * nx] };
        let c = &u[i * nx..(i + 1) * nx];
        let o = &mut out[i * nx..(i + 1) * nx];
        for j in 0..nx {
            let w = c[j.saturating_sub(1)];
            let e = c[(j + 1).min(nx - 1)];
            o[j] = c[j] + alpha * ((n[j] + s[j]) + (w + e) - 4.0 * c[j]);
        }
    }
}

/// Runs the iteration and returns this rank's rows.
pub fn run(comm: &mut Communicator, p: &HeatParams) -> Result<Vec<f64>, BenchError> {
    let (rank, size) = (comm.rank(), comm.size());
    let mine = block(p.ny as u64, size, rank);
    let rows = (mine.end - mine.start) as usize;
    let nx = p.nx;
    let mut u = Vec::with_capacity(rows * nx);
    for y in mine {
        u.extend(p.initial_row(y as usize));
    }
    let mut next = u.clone();
    let nb = Neighbors::open(rank, size);
    for _ in 0..p.steps {
        let (first, last) = (&u[..nx], &u[(rows - 1) * nx..]);
        let [top, bottom] = exchange(comm, nb, first, last)?;
        // physical boundaries reflect
        let north = halo::row(top.as_ref(), first)?;
        let south = halo::row(bottom.as_ref(), last)?;
        sweep(&north, &u, &south, &mut next, nx, p.alpha);
        std::mem::swap(&mut u, &mut next);
    }
    Ok(u)
}

/// The whole grid after `p.steps` iterations, computed in one process.
pub fn serial(p: &HeatParams) -> Vec<f64> {
    let (nx, ny) = (p.nx, p.ny);
    let mut u: Vec<f64> = (0..ny).flat_map(|y| p.initial_row(y)).collect();
    let mut next = u.clone();
    for _ in 0..p.steps {
        sweep(&u[..nx], &u, &u[(ny - 1) * nx..], &mut next, nx, p.alpha);
        std::mem::swap(&mut u, &mut next);
    }
    u
}

pub fn total_heat(grid: &[f64]) -> f64 {
    grid.iter().sum()
}

pub const TOLERANCE: f64 = 1e-12;

pub fn validate(comm: &mut Communicator, p: &HeatParams, local: &[f64]) -> Result<Validation, BenchError> {
    verdict(comm, bytemuck::cast_slice(local), |blocks| {
        let got: Vec<f64> = bytemuck::pod_collect_to_vec(&blocks.concat());
        let expect = serial(p);
        if got.len() != expect.len() {
            return Err(format!("{} cells out, {} expected", got.len(), expect.len()));
        }
        let diff = max_abs_diff(&got, &expect);
        let initial: f64 = (0..p.ny).map(|y| total_heat(&p.initial_row(y))).sum();
        let drift = (total_heat(&got) - initial).abs() / initial.abs().max(f64::MIN_POSITIVE);
        let detail = format!("max diff {diff:e}, heat drift {drift:e}");
        if diff <= TOLERANCE && drift <= TOLERANCE * p.steps.max(1) as f64 {
            Ok(detail)
        } else {
            Err(detail)
        }
    })
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
