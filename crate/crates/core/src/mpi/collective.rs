//! Collectives built from the point-to-point layer.
//!
//! Collective traffic uses negative tags drawn from a per-communicator
//! sequence, so it never matches user receives and consecutive collectives
//! never cross-match. Every rank must call collectives in the same order.

use std::sync::Arc;

use bytemuck::Pod;

use super::{Communicator, Match, MpiError, Outgoing, Payload, SharedBuf};
use crate::mpi::Backend;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
    Min,
}

/// Element types supported by reductions.
pub trait Reducible: Pod {
    fn combine(op: ReduceOp, a: Self, b: Self) -> Self;
}

impl Reducible for i64 {
    fn combine(op: ReduceOp, a: i64, b: i64) -> i64 {
        match op {
            ReduceOp::Sum => a.wrapping_add(b),
            ReduceOp::Max => a.max(b),
            ReduceOp::Min => a.min(b),
        }
    }
}

impl Reducible for u64 {
    fn combine(op: ReduceOp, a: u64, b: u64) -> u64 {
        match op {
            ReduceOp::Sum => a.wrapping_add(b),
            ReduceOp::Max => a.max(b),
            ReduceOp::Min => a.min(b),
        }
    }
}

impl Reducible for f64 {
    fn combine(op: ReduceOp, a: f64, b: f64) -> f64 {
        match op {
            ReduceOp::Sum => a + b,
            ReduceOp::Max => a.max(b),
            ReduceOp::Min => a.min(b),
        }
    }
}

fn decode<T: Pod>(bytes: &[u8]) -> Vec<T> {
    bytemuck::pod_collect_to_vec(bytes)
}

impl Communicator {
    fn next_coll_tag(&mut self) -> i32 {
        self.coll_seq += 1;
        -1 - (self.coll_seq % (1 << 30)) as i32
    }

    fn send_internal(&mut self, dst: u32, tag: i32, data: Outgoing<'_>) -> Result<(), MpiError> {
        self.post(dst, tag, data, None)
    }

    fn recv_internal(&mut self, src: u32, tag: i32, by_ref: bool) -> Result<Payload, MpiError> {
        let msg = self.recv_inner(Match::exact(src, tag), true, by_ref)?;
        Ok(msg.payload)
    }

    fn bcast_payload(&mut self, root: u32, data: &[u8], by_ref: bool) -> Result<Payload, MpiError> {
        self.check_peer(root)?;
        let tag = self.next_coll_tag();
        if self.rank != root {
            return self.recv_internal(root, tag, by_ref);
        }
        let shared = self.backend() == Backend::PointerShared
            && data.len() > self.eager_threshold
            && self.size > 1;
        if !shared {
            for dst in (0..self.size).filter(|&d| d != root) {
                self.send_internal(dst, tag, Outgoing::Bytes(data))?;
            }
            return Ok(Payload::Bytes(data.to_vec()));
        }
        // one staged region, one reference per receiver
        let own = self.copy_to_shared(data)?;
        let map = Arc::clone(&self.map);
        let alloc = map.allocator();
        for dst in (0..self.size).filter(|&d| d != root) {
            alloc.incref(own.region_id())?;
            let extra = SharedBuf::adopt(
                Arc::clone(&map),
                own.region_id(),
                own.offset(),
                own.len(),
                self.rank,
            );
            self.send_internal(dst, tag, Outgoing::Shared(extra))?;
        }
        Ok(Payload::Shared(own))
    }

    /// Broadcast into a local buffer. On non-roots `buf` is replaced.
    pub fn bcast(&mut self, root: u32, buf: &mut Vec<u8>) -> Result<(), MpiError> {
        self.timed(|c| {
            let p = c.bcast_payload(root, buf, false)?;
            if c.rank != root {
                *buf = p.into_vec();
            }
            Ok(())
        })
    }

    /// Broadcast whose result may reference one shared region on every rank.
    /// Only the root's `data` is read.
    pub fn bcast_shared(&mut self, root: u32, data: &[u8]) -> Result<Payload, MpiError> {
        self.timed(|c| c.bcast_payload(root, data, true))
    }

    fn reduce_inner<T: Reducible>(
        &mut self,
        root: u32,
        data: &[T],
        op: ReduceOp,
    ) -> Result<Option<Vec<T>>, MpiError> {
        self.check_peer(root)?;
        let tag = self.next_coll_tag();
        if self.rank != root {
            self.send_internal(root, tag, Outgoing::Bytes(bytemuck::cast_slice(data)))?;
            return Ok(None);
        }
        let mut parts: Vec<Option<Vec<T>>> = (0..self.size).map(|_| None).collect();
        parts[root as usize] = Some(data.to_vec());
        for src in (0..self.size).filter(|&s| s != root) {
            let p = self.recv_internal(src, tag, true)?;
            let v: Vec<T> = decode(p.as_slice());
            if v.len() != data.len() {
                return Err(MpiError::MismatchedCounts(format!(
                    "rank {src} contributed {} elements, root has {}",
                    v.len(),
                    data.len()
                )));
            }
            parts[src as usize] = Some(v);
        }
        // fixed rank-ascending combination order keeps float sums reproducible
        let mut parts = parts.into_iter().map(|p| p.expect("all ranks contributed"));
        let mut acc = parts.next().expect("at least one rank");
        for part in parts {
            for (a, b) in acc.iter_mut().zip(part) {
                *a = T::combine(op, *a, b);
            }
        }
        Ok(Some(acc))
    }

    /// Element-wise reduction; the result is returned on `root` only.
    pub fn reduce<T: Reducible>(
        &mut self,
        root: u32,
        data: &[T],
        op: ReduceOp,
    ) -> Result<Option<Vec<T>>, MpiError> {
        self.timed(|c| c.reduce_inner(root, data, op))
    }

    pub fn allreduce<T: Reducible>(&mut self, data: &[T], op: ReduceOp) -> Result<Vec<T>, MpiError> {
        self.timed(|c| {
            let reduced = c.reduce_inner(0, data, op)?;
            let bytes: &[u8] = match &reduced {
                Some(v) => bytemuck::cast_slice(v),
                None => &[],
            };
            let p = c.bcast_payload(0, bytes, true)?;
            let out: Vec<T> = decode(p.as_slice());
            if out.len() != data.len() {
                return Err(MpiError::MismatchedCounts(format!(
                    "allreduce of {} elements, local input has {}",
                    out.len(),
                    data.len()
                )));
            }
            Ok(out)
        })
    }

    pub fn allreduce_scalar<T: Reducible>(&mut self, v: T, op: ReduceOp) -> Result<T, MpiError> {
        Ok(self.allreduce(&[v], op)?[0])
    }

    /// Collects every rank's bytes at `root`, indexed by rank.
    pub fn gather(&mut self, root: u32, data: &[u8]) -> Result<Option<Vec<Vec<u8>>>, MpiError> {
        self.timed(|c| {
            c.check_peer(root)?;
            let tag = c.next_coll_tag();
            if c.rank != root {
                c.send_internal(root, tag, Outgoing::Bytes(data))?;
                return Ok(None);
            }
            let mut out = Vec::with_capacity(c.size as usize);
            for src in 0..c.size {
                if src == root {
                    out.push(data.to_vec());
                } else {
                    out.push(c.recv_internal(src, tag, false)?.into_vec());
                }
            }
            Ok(Some(out))
        })
    }

    /// Personalized all-to-all over byte counts and displacements, exchanged
    /// in pairwise rounds: in round k rank r sends to r+k and receives from
    /// r-k.
    pub fn alltoallv(
        &mut self,
        send: &[u8],
        send_counts: &[usize],
        send_displs: &[usize],
        recv: &mut [u8],
        recv_counts: &[usize],
        recv_displs: &[usize],
    ) -> Result<(), MpiError> {
        let n = self.size as usize;
        for (what, v) in [
            ("send_counts", send_counts),
            ("send_displs", send_displs),
            ("recv_counts", recv_counts),
            ("recv_displs", recv_displs),
        ] {
            if v.len() != n {
                return Err(MpiError::MismatchedCounts(format!(
                    "{what} has {} entries for {n} ranks",
                    v.len()
                )));
            }
        }
        for i in 0..n {
            if send_displs[i] + send_counts[i] > send.len() {
                return Err(MpiError::MismatchedCounts(format!("send block {i} out of bounds")));
            }
            if recv_displs[i] + recv_counts[i] > recv.len() {
                return Err(MpiError::MismatchedCounts(format!("recv block {i} out of bounds")));
            }
        }
        self.timed(|c| {
            let tag = c.next_coll_tag();
            let r = c.rank as usize;
            for k in 1..n {
                let dst = (r + k) % n;
                let block = &send[send_displs[dst]..send_displs[dst] + send_counts[dst]];
                c.send_internal(dst as u32, tag, Outgoing::Bytes(block))?;
            }
            let own = &send[send_displs[r]..send_displs[r] + send_counts[r]];
            if own.len() != recv_counts[r] {
                return Err(MpiError::MismatchedCounts(format!(
                    "rank {r} sends itself {} bytes but expects {}",
                    own.len(),
                    recv_counts[r]
                )));
            }
            recv[recv_displs[r]..recv_displs[r] + own.len()].copy_from_slice(own);
            c.counters.eager_bytes_copied += own.len() as u64;
            for k in 1..n {
                let src = (r + n - k) % n;
                let msg = c.recv_inner(Match::exact(src as u32, tag), true, false)?;
                if msg.status.len != recv_counts[src] {
                    return Err(MpiError::MismatchedCounts(format!(
                        "rank {src} sent {} bytes, expected {}",
                        msg.status.len, recv_counts[src]
                    )));
                }
                recv[recv_displs[src]..recv_displs[src] + msg.status.len]
                    .copy_from_slice(msg.payload.as_slice());
            }
            Ok(())
        })
    }

    /// All-to-all of shared buffers: `parts[d]` goes to rank `d`, and the
    /// result holds what each rank sent here. The local part is returned as
    /// is; the rest move by reference on the pointer backend.
    pub fn alltoall_shared(&mut self, parts: Vec<SharedBuf>) -> Result<Vec<Payload>, MpiError> {
        let n = self.size as usize;
        if parts.len() != n {
            return Err(MpiError::MismatchedCounts(format!(
                "{} parts for {n} ranks",
                parts.len()
            )));
        }
        self.timed(|c| {
            let tag = c.next_coll_tag();
            let r = c.rank as usize;
            let mut parts: Vec<Option<SharedBuf>> = parts.into_iter().map(Some).collect();
            for k in 1..n {
                let dst = (r + k) % n;
                let part = parts[dst].take().expect("each part sent once");
                c.send_internal(dst as u32, tag, Outgoing::Shared(part))?;
            }
            let mut out: Vec<Option<Payload>> = (0..n).map(|_| None).collect();
            out[r] = parts[r].take().map(Payload::Shared);
            for k in 1..n {
                let src = (r + n - k) % n;
                out[src] = Some(c.recv_internal(src as u32, tag, true)?);
            }
            Ok(out.into_iter().map(|p| p.expect("filled")).collect())
        })
    }
}
