//! Level-synchronous breadth-first search over a block-partitioned,
//! undirected graph. Each level, owners of frontier vertices send
//! `(neighbor, parent)` candidates to the neighbor's owner.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shmpi_core::{Communicator, ReduceOp};

use crate::partition::{block, owner};
use crate::{verdict, BenchError, Validation};

/// Parent of a vertex the search never reached.
pub const NO_PARENT: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GraphSource {
    /// `edgefactor << scale` uniform random edges over `1 << scale` vertices.
    Random { scale: u32, edgefactor: u32 },
    Edges { vertices: u64, edges: Vec<(u64, u64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BfsParams {
    pub graph: GraphSource,
    pub root: u64,
    pub seed: u64,
}

impl BfsParams {
    pub fn random(scale: u32, edgefactor: u32, seed: u64) -> Self {
        BfsParams {
            graph: GraphSource::Random { scale, edgefactor },
            root: 0,
            seed,
        }
    }

    pub fn explicit(vertices: u64, edges: Vec<(u64, u64)>, root: u64) -> Self {
        BfsParams {
            graph: GraphSource::Edges { vertices, edges },
            root,
            seed: 0,
        }
    }

    pub fn vertices(&self) -> u64 {
        match &self.graph {
            GraphSource::Random { scale, .. } => 1 << scale,
            GraphSource::Edges { vertices, .. } => *vertices,
        }
    }

    /// The full edge list. Every rank generates the same sequence.
    pub fn edge_list(&self) -> Vec<(u64, u64)> {
        match &self.graph {
            GraphSource::Random { scale, edgefactor } => {
                let mask = (1u64 << scale) - 1;
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (0..(*edgefactor as u64) << scale)
                    .map(|_| (rng.next_u64() & mask, rng.next_u64() & mask))
                    .collect()
            }
            GraphSource::Edges { edges, .. } => edges.clone(),
        }
    }

    pub fn check(&self, ranks: u32) -> Result<(), BenchError> {
        let n = self.vertices();
        if let GraphSource::Random { scale, .. } = self.graph {
            if !(1..=30).contains(&scale) {
                return Err(BenchError::InvalidSpec(format!("bfs scale {scale} outside 1..=30")));
            }
        }
        if n < ranks as u64 {
            return Err(BenchError::InvalidSpec(format!(
                "{n} vertices cannot be split over {ranks} ranks"
            )));
        }
        if self.root >= n {
            return Err(BenchError::InvalidSpec(format!("root {} out of range", self.root)));
        }
        if let GraphSource::Edges { edges, .. } = &self.graph {
            if let Some(e) = edges.iter().find(|(u, v)| *u >= n || *v >= n) {
                return Err(BenchError::InvalidSpec(format!("edge {e:?} out of range")));
            }
        }
        Ok(())
    }
}

/// Adjacency of a contiguous vertex range, in edge-list order.
struct Csr {
    first: u64,
    offsets: Vec<usize>,
    targets: Vec<u64>,
}

impl Csr {
    fn build(first: u64, count: u64, edges: &[(u64, u64)]) -> Csr {
        let local = |v: u64| (v >= first && v < first + count).then(|| (v - first) as usize);
        let mut offsets = vec![0usize; count as usize + 1];
        for &(u, v) in edges.iter().filter(|(u, v)| u != v) {
            for (a, _) in [(u, v), (v, u)] {
                if let Some(i) = local(a) {
                    offsets[i + 1] += 1;
                }
            }
        }
        for i in 0..count as usize {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut targets = vec![0u64; offsets[count as usize]];
        for &(u, v) in edges.iter().filter(|(u, v)| u != v) {
            for (a, b) in [(u, v), (v, u)] {
                if let Some(i) = local(a) {
                    targets[fill[i]] = b;
                    fill[i] += 1;
                }
            }
        }
        Csr {
            first,
            offsets,
            targets,
        }
    }

    fn neighbors(&self, v: u64) -> &[u64] {
        let i = (v - self.first) as usize;
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// Runs the search and returns the parents of this rank's vertex block.
pub fn run(comm: &mut Communicator, p: &BfsParams) -> Result<Vec<u64>, BenchError> {
    let (rank, size) = (comm.rank(), comm.size());
    let n = p.vertices();
    let mine = block(n, size, rank);
    let graph = Csr::build(mine.start, mine.end - mine.start, &p.edge_list());
    let mut parent = vec![NO_PARENT; (mine.end - mine.start) as usize];
    let mut frontier = Vec::new();
    if mine.contains(&p.root) {
        parent[(p.root - mine.start) as usize] = p.root;
        frontier.push(p.root);
    }
    loop {
        let mut counts = vec![0usize; size as usize];
        for &v in &frontier {
            for &w in graph.neighbors(v) {
                counts[owner(n, size, w) as usize] += 1;
            }
        }
        let mut parts = counts
            .iter()
            .map(|&c| comm.alloc_shared(c * 16))
            .collect::<Result<Vec<_>, _>>()?;
        let mut cursor = vec![0usize; size as usize];
        for &v in &frontier {
            for &w in graph.neighbors(v) {
                let d = owner(n, size, w) as usize;
                let at = cursor[d];
                let out = &mut parts[d].as_mut_slice()[at..at + 16];
                out[..8].copy_from_slice(&w.to_le_bytes());
                out[8..].copy_from_slice(&v.to_le_bytes());
                cursor[d] += 16;
            }
        }
        let arrived = comm.alltoall_shared(parts)?;
        let mut next = Vec::new();
        for part in &arrived {
            for pair in part.as_slice().chunks_exact(16) {
                let w = u64::from_le_bytes(pair[..8].try_into().unwrap());
                let v = u64::from_le_bytes(pair[8..].try_into().unwrap());
                let slot = &mut parent[(w - mine.start) as usize];
                if *slot == NO_PARENT {
                    *slot = v;
                    next.push(w);
                }
            }
        }
        drop(arrived);
        let total = comm.allreduce_scalar(next.len() as u64, ReduceOp::Sum)?;
        frontier = next;
        if total == 0 {
            break;
        }
    }
    Ok(parent)
}

/// Checks a complete parent array against the graph: parent links are
/// edges, levels grow by one along them, and reachability is exact.
pub fn check_parents(p: &BfsParams, parent: &[u64]) -> Result<String, String> {
    let n = p.vertices();
    if parent.len() as u64 != n {
        return Err(format!("{} parents for {n} vertices", parent.len()));
    }
    let graph = Csr::build(0, n, &p.edge_list());
    let mut sorted: Vec<Vec<u64>> = (0..n).map(|v| graph.neighbors(v).to_vec()).collect();
    sorted.iter_mut().for_each(|a| a.sort_unstable());
    let mut level = vec![u64::MAX; n as usize];
    level[p.root as usize] = 0;
    let mut queue = std::collections::VecDeque::from([p.root]);
    while let Some(v) = queue.pop_front() {
        for &w in graph.neighbors(v) {
            if level[w as usize] == u64::MAX {
                level[w as usize] = level[v as usize] + 1;
                queue.push_back(w);
            }
        }
    }
    let mut visited = 0u64;
    for v in 0..n {
        let (pv, lv) = (parent[v as usize], level[v as usize]);
        match (lv == u64::MAX, pv == NO_PARENT) {
            (true, true) => continue,
            (true, false) => return Err(format!("unreachable vertex {v} has parent {pv}")),
            (false, true) => return Err(format!("reachable vertex {v} was not visited")),
            (false, false) => {}
        }
        visited += 1;
        if v == p.root {
            if pv != v {
                return Err(format!("root {v} has parent {pv}"));
            }
            continue;
        }
        if pv >= n || sorted[v as usize].binary_search(&pv).is_err() {
            return Err(format!("parent link {v}->{pv} is not an edge"));
        }
        if level[pv as usize] + 1 != lv {
            return Err(format!(
                "vertex {v} at level {lv} but parent {pv} at level {}",
                level[pv as usize]
            ));
        }
    }
    Ok(format!("{visited} of {n} vertices visited"))
}

pub fn validate(comm: &mut Communicator, p: &BfsParams, parent: &[u64]) -> Result<Validation, BenchError> {
    verdict(comm, bytemuck::cast_slice(parent), |blocks| {
        let full: Vec<u64> = bytemuck::pod_collect_to_vec(&blocks.concat());
        check_parents(p, &full)
    })
}
