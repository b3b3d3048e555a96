//! D2Q9 lattice Boltzmann with BGK collision on a fully periodic lattice,
//! decomposed into row blocks arranged in a ring.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shmpi_core::Communicator;

use crate::halo::{self, exchange, Neighbors};
use crate::heat2d::{max_abs_diff, unit};
use crate::partition::block;
use crate::{verdict, BenchError, Validation};

pub const Q: usize = 9;
pub const EX: [i64; Q] = [0, 1, 0, -1, 0, 1, -1, -1, 1];
pub const EY: [i64; Q] = [0, 0, 1, 0, -1, 1, 1, -1, -1];
pub const W: [f64; Q] = [
    4.0 / 9.0,
    1.0 / 9.0,
    1.0 / 9.0,
    1.0 / 9.0,
    1.0 / 9.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbmParams {
    pub nx: usize,
    pub ny: usize,
    pub steps: u32,
    pub tau: f64,
    /// Density perturbation: cell density is `1 + amplitude * (r - 0.5)`.
    pub amplitude: f64,
    pub seed: u64,
}

impl LbmParams {
    pub fn new(nx: usize, ny: usize, steps: u32, seed: u64) -> Self {
        LbmParams {
            nx,
            ny,
            steps,
            tau: 0.8,
            amplitude: 0.05,
            seed,
        }
    }

    /// Equilibrium distributions at rest for global row `y`.
    pub fn initial_row(&self, y: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(2 * (y * self.nx) as u128);
        let mut row = Vec::with_capacity(self.nx * Q);
        for _ in 0..self.nx {
            let rho = 1.0 + self.amplitude * (unit(rng.next_u64()) - 0.5);
            row.extend(W.iter().map(|w| w * rho));
        }
        row
    }

    pub fn check(&self, ranks: u32) -> Result<(), BenchError> {
        if self.nx == 0 || self.ny < ranks as usize {
            return Err(BenchError::InvalidSpec(format!(
                "{}x{} lattice cannot be split into {ranks} row blocks",
                self.nx, self.ny
            )));
        }
        if self.tau <= 0.5 {
            return Err(BenchError::InvalidSpec(format!("tau {} must exceed 0.5", self.tau)));
        }
        Ok(())
    }
}

/// Pull streaming from `f` into `out`, then BGK collision in place. `north`
/// and `south` are the rows just outside the block.
fn step(north: &[f64], f: &[f64], south: &[f64], out: &mut [f64], nx: usize, omega: f64) {
    let row = nx * Q;
    let rows = f.len() / row;
    let src = |r: i64| -> &[f64] {
        if r < 0 {
            north
        } else if r as usize >= rows {
            south
        } else {
            &f[r as usize * row..(r as usize + 1) * row]
        }
    };
    for i in 0..rows {
        for x in 0..nx {
            let cell = i * row + x * Q;
            for q in 0..Q {
                let sx = (x as i64 - EX[q]).rem_euclid(nx as i64) as usize;
                out[cell + q] = src(i as i64 - EY[q])[sx * Q + q];
            }
            collide(&mut out[cell..cell + Q], omega);
        }
    }
}

fn collide(c: &mut [f64], omega: f64) {
    let mut rho = 0.0;
    let (mut jx, mut jy) = (0.0, 0.0);
    for q in 0..Q {
        rho += c[q];
        jx += c[q] * EX[q] as f64;
        jy += c[q] * EY[q] as f64;
    }
    let (ux, uy) = (jx / rho, jy / rho);
    let usq = ux * ux + uy * uy;
    for q in 0..Q {
        let eu = EX[q] as f64 * ux + EY[q] as f64 * uy;
        let feq = W[q] * rho * (1.0 + 3.0 * eu + 4.5 * eu * eu - 1.5 * usq);
        c[q] += omega * (feq - c[q]);
    }
}

/// Runs the simulation and returns this rank's rows of distributions.
pub fn run(comm: &mut Communicator, p: &LbmParams) -> Result<Vec<f64>, BenchError> {
    let (rank, size) = (comm.rank(), comm.size());
    let mine = block(p.ny as u64, size, rank);
    let rows = (mine.end - mine.start) as usize;
    let row = p.nx * Q;
    let mut f = Vec::with_capacity(rows * row);
    for y in mine {
        f.extend(p.initial_row(y as usize));
    }
    let mut next = f.clone();
    let nb = Neighbors::ring(rank, size);
    for _ in 0..p.steps {
        let (first, last) = (&f[..row], &f[(rows - 1) * row..]);
        let [top, bottom] = exchange(comm, nb, first, last)?;
        // a ring of one wraps onto itself
        let north = halo::row(top.as_ref(), last)?;
        let south = halo::row(bottom.as_ref(), first)?;
        step(&north, &f, &south, &mut next, p.nx, 1.0 / p.tau);
        std::mem::swap(&mut f, &mut next);
    }
    Ok(f)
}

/// The whole lattice after `p.steps` steps, computed in one process.
pub fn serial(p: &LbmParams) -> Vec<f64> {
    let (ny, row) = (p.ny, p.nx * Q);
    let mut f: Vec<f64> = (0..ny).flat_map(|y| p.initial_row(y)).collect();
    let mut next = f.clone();
    for _ in 0..p.steps {
        step(&f[(ny - 1) * row..], &f, &f[..row], &mut next, p.nx, 1.0 / p.tau);
        std::mem::swap(&mut f, &mut next);
    }
    f
}

pub fn mass(f: &[f64]) -> f64 {
    f.iter().sum()
}

pub const TOLERANCE: f64 = 1e-10;

pub fn validate(comm: &mut Communicator, p: &LbmParams, local: &[f64]) -> Result<Validation, BenchError> {
    verdict(comm, bytemuck::cast_slice(local), |blocks| {
        let got: Vec<f64> = bytemuck::pod_collect_to_vec(&blocks.concat());
        let expect = serial(p);
        if got.len() != expect.len() {
            return Err(format!("{} values out, {} expected", got.len(), expect.len()));
        }
        let diff = max_abs_diff(&got, &expect);
        let initial: f64 = (0..p.ny).map(|y| mass(&p.initial_row(y))).sum();
        let drift = (mass(&got) - initial).abs() / initial;
        let detail = format!("max diff {diff:e}, mass drift {drift:e}");
        if diff <= TOLERANCE && drift <= TOLERANCE {
            Ok(detail)
        } else {
            Err(detail)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_and_velocities_are_consistent() {
        let sum: f64 = W.iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
        for q in 0..Q {
            // opposite direction has the same weight
            let opp = (0..Q).find(|&o| EX[o] == -EX[q] && EY[o] == -EY[q]).unwrap();
            assert_eq!(W[q], W[opp]);
        }
    }

    #[test]
    fn collision_keeps_mass_and_momentum() {
        let mut c = [0.11, 0.12, 0.09, 0.1, 0.13, 0.03, 0.02, 0.025, 0.031];
        let moments = |c: &[f64]| {
            let rho: f64 = c.iter().sum();
            let jx: f64 = (0..Q).map(|q| c[q] * EX[q] as f64).sum();
            let jy: f64 = (0..Q).map(|q| c[q] * EY[q] as f64).sum();
            (rho, jx, jy)
        };
        let before = moments(&c);
        collide(&mut c, 1.25);
        let after = moments(&c);
        assert!((before.0 - after.0).abs() < 1e-15);
        assert!((before.1 - after.1).abs() < 1e-15);
        assert!((before.2 - after.2).abs() < 1e-15);
    }
}
