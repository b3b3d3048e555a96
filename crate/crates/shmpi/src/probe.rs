//! Small SPMD programs run as ranks by the multi-process checks. Each one
//! writes `probe-<rank>.json` into the job's metrics directory.

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use shmpi_core::msgqueue::{Descriptor, EntryStatus, QueueError};
use shmpi_core::mpi::ENV_METRICS_DIR;
use shmpi_core::sync::PollingPolicy;
use shmpi_core::{AllocError, Communicator, Match, Message, MpiError, Payload, ReduceOp, RegionId, SegOffset};

pub fn probe_file(rank: u32) -> String {
    format!("probe-{rank}.json")
}

fn report(comm: &Communicator, value: Value) -> Result<(), MpiError> {
    if let Ok(dir) = std::env::var(ENV_METRICS_DIR) {
        let path = PathBuf::from(dir).join(probe_file(comm.rank()));
        std::fs::write(path, value.to_string())?;
    }
    Ok(())
}

/// Eight shared counters in one region allocated by rank 0. Every rank gets
/// the offset through a broadcast.
struct SharedWords {
    region: Option<RegionId>,
    base: *const AtomicU64,
}

impl SharedWords {
    fn new(comm: &mut Communicator) -> Result<SharedWords, MpiError> {
        let mut msg = Vec::new();
        let mut region = None;
        if comm.rank() == 0 {
            let (id, off) = comm.segment().allocator().malloc(64, 0)?;
            comm.segment().resolve(off, 64)?.copy_from(&[0u8; 64]);
            region = Some(id);
            msg = off.get().to_le_bytes().to_vec();
        }
        comm.bcast(0, &mut msg)?;
        let off = SegOffset(u64::from_le_bytes(msg[..8].try_into().unwrap()));
        let base = comm.segment().resolve(off, 64)?.as_ptr() as *const AtomicU64;
        Ok(SharedWords { region, base })
    }

    fn word(&self, i: usize) -> &AtomicU64 {
        assert!(i < 8);
        // SAFETY: the region is 64-byte aligned, 64 bytes long and stays
        // allocated until `release`, which runs after the last use
        unsafe { &*self.base.add(i) }
    }

    fn release(self, comm: &mut Communicator) -> Result<(), MpiError> {
        comm.barrier()?;
        if let Some(id) = self.region {
            comm.segment().allocator().decref(id, comm.rank())?;
        }
        Ok(())
    }
}

pub fn hello(comm: &mut Communicator) -> Result<(), MpiError> {
    println!("hello from rank {} of {}", comm.rank(), comm.size());
    comm.barrier()
}

/// `rank` exits with `code` right after attaching; the rest wait in a barrier.
pub fn fail(comm: &mut Communicator, rank: u32, code: i32) -> Result<(), MpiError> {
    if comm.rank() == rank {
        std::process::exit(code);
    }
    comm.barrier()
}

/// `rank` never returns; the rest wait in a barrier.
pub fn hang(comm: &mut Communicator, rank: u32) -> Result<(), MpiError> {
    if comm.rank() == rank {
        loop {
            std::thread::sleep(Duration::from_secs(1));
        }
    }
    comm.barrier()
}

/// Every rank increments one shared word `iters` times under the segment
/// lock, with a plain load and store.
pub fn lock_count(comm: &mut Communicator, iters: u64) -> Result<(), MpiError> {
    let words = SharedWords::new(comm)?;
    comm.barrier()?;
    let lock = comm.segment().meta_lock();
    let policy = PollingPolicy::from_env();
    let me = comm.rank();
    let started = Instant::now();
    for _ in 0..iters {
        let _g = lock.guard(me, &policy, None)?;
        let v = words.word(0).load(Ordering::Relaxed);
        words.word(0).store(v + 1, Ordering::Relaxed);
    }
    let elapsed = started.elapsed();
    comm.barrier()?;
    let total = words.word(0).load(Ordering::Acquire);
    report(comm, json!({ "iters": iters, "total": total, "elapsed_ms": elapsed.as_millis() as u64 }))?;
    words.release(comm)
}

/// Before barrier `k` every rank bumps a shared counter; right after it the
/// counter must lie in `[(k+1)n, (k+2)n)`.
pub fn barrier_lockstep(comm: &mut Communicator, gens: u64) -> Result<(), MpiError> {
    let words = SharedWords::new(comm)?;
    comm.barrier()?;
    let n = comm.size() as u64;
    let mut violations = 0u64;
    let mut first_violation = Value::Null;
    for k in 0..gens {
        words.word(0).fetch_add(1, Ordering::AcqRel);
        comm.barrier()?;
        let v = words.word(0).load(Ordering::Acquire);
        if v < (k + 1) * n || v >= (k + 2) * n {
            violations += 1;
            if first_violation.is_null() {
                first_violation = json!({ "generation": k, "counter": v });
            }
        }
    }
    report(
        comm,
        json!({ "generations": gens, "violations": violations, "first_violation": first_violation }),
    )?;
    words.release(comm)
}

fn fill_pattern(buf: &mut [u8], key: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.fill_bytes(buf);
}

fn pattern_byte(id: RegionId, rank: u32) -> u8 {
    (id.0 ^ (id.0 >> 29) ^ rank as u64) as u8 | 1
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct AllocReport {
    pub ops: u64,
    pub mallocs: u64,
    pub frees: u64,
    pub shared_sent: u64,
    pub shared_received: u64,
    pub out_of_memory: u64,
    pub underflows: u64,
    pub corrupted: u64,
    pub other_errors: Vec<String>,
    /// Rank 0 only, after everyone released everything.
    pub bytes_in_use_after: Option<u64>,
    pub consistency: Option<String>,
}

fn note(rep: &mut AllocReport, e: AllocError) {
    match e {
        AllocError::UnderflowDetected(_) => rep.underflows += 1,
        AllocError::OutOfSharedMemory { .. } => rep.out_of_memory += 1,
        other => rep.other_errors.push(other.to_string()),
    }
}

const TAG_SHARE: i32 = 1;
const TAG_DONE: i32 = 2;
/// Regions a rank holds at once; keeps the stress inside the region table.
const LIVE_CAP: usize = 1024;

/// Random malloc / free / incref / hand-off traffic. Handed-off regions are
/// checked and released by the next rank.
pub fn alloc_stress(comm: &mut Communicator, ops: u64, seed: u64) -> Result<(), MpiError> {
    let me = comm.rank();
    let n = comm.size();
    let next = (me + 1) % n;
    let prev = (me + n - 1) % n;
    let map = std::sync::Arc::clone(comm.segment());
    let alloc = map.allocator();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (me as u64) << 40);
    let mut live: Vec<(RegionId, SegOffset, u64)> = Vec::new();
    let mut rep = AllocReport {
        ops,
        ..AllocReport::default()
    };
    let verify = |id: RegionId, off: SegOffset, len: u64, owner: u32| -> bool {
        let span = map.resolve(off, len).expect("live region resolves");
        let want = pattern_byte(id, owner);
        (0..len as usize).step_by(97).chain([len as usize - 1]).all(|i| span.read_u8(i) == want)
    };
    // hand-offs from the previous rank are released as they arrive
    let adopt = |rep: &mut AllocReport, m: &Message| {
        let w: Vec<u64> = m
            .payload
            .as_slice()
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let (id, off, len) = (RegionId(w[0]), SegOffset(w[1]), w[2]);
        if !verify(id, off, len, prev) {
            rep.corrupted += 1;
        }
        match alloc.decref(id, me) {
            Ok(0) => rep.shared_received += 1,
            Ok(left) => rep.other_errors.push(format!("{id} still has {left} refs")),
            Err(e) => note(rep, e),
        }
    };
    comm.barrier()?;
    let from_prev = Match::new(Some(prev), None);
    let mut incoming = comm.irecv(from_prev)?;
    let mut prev_done = false;
    for _ in 0..ops {
        if !prev_done && comm.test(&mut incoming)? {
            let m = comm.wait_message(&mut incoming)?;
            if m.status.tag == TAG_DONE {
                prev_done = true;
            } else {
                adopt(&mut rep, &m);
                incoming = comm.irecv(from_prev)?;
            }
        }
        let roll = rng.gen_range(0..100);
        if (roll < 45 && live.len() < LIVE_CAP) || live.is_empty() {
            let len = if rng.gen_bool(0.05) {
                rng.gen_range(4096..65536)
            } else {
                rng.gen_range(1..4096)
            };
            match alloc.malloc(len, me) {
                Ok((id, off)) => {
                    let want = pattern_byte(id, me);
                    let span = map.resolve(off, len).expect("fresh region resolves");
                    (0..len as usize).for_each(|i| span.write_u8(i, want));
                    live.push((id, off, len));
                    rep.mallocs += 1;
                }
                Err(e) => note(&mut rep, e),
            }
        } else if roll < 80 {
            let (id, off, len) = live.swap_remove(rng.gen_range(0..live.len()));
            if !verify(id, off, len, me) {
                rep.corrupted += 1;
            }
            match alloc.decref(id, me) {
                Ok(0) => rep.frees += 1,
                Ok(left) => rep.other_errors.push(format!("{id} still has {left} refs")),
                Err(e) => note(&mut rep, e),
            }
        } else if roll < 90 {
            let (id, _, _) = live[rng.gen_range(0..live.len())];
            match alloc.incref(id) {
                Ok(2) => {}
                Ok(c) => rep.other_errors.push(format!("incref of {id} gave {c}")),
                Err(e) => note(&mut rep, e),
            }
            if let Err(e) = alloc.decref(id, me) {
                note(&mut rep, e);
            }
        } else {
            let (id, off, len) = live.swap_remove(rng.gen_range(0..live.len()));
            let mut msg = Vec::with_capacity(24);
            for v in [id.0, off.get(), len] {
                msg.extend_from_slice(&v.to_le_bytes());
            }
            comm.send(next, TAG_SHARE, &msg)?;
            rep.shared_sent += 1;
        }
        if rep.other_errors.len() > 20 {
            break;
        }
    }
    for (id, off, len) in live.drain(..) {
        if !verify(id, off, len, me) {
            rep.corrupted += 1;
        }
        match alloc.decref(id, me) {
            Ok(0) => rep.frees += 1,
            Ok(left) => rep.other_errors.push(format!("{id} still has {left} refs")),
            Err(e) => note(&mut rep, e),
        }
    }
    comm.send(next, TAG_DONE, &[])?;
    while !prev_done {
        let m = comm.wait_message(&mut incoming)?;
        if m.status.tag == TAG_DONE {
            prev_done = true;
        } else {
            adopt(&mut rep, &m);
            incoming = comm.irecv(from_prev)?;
        }
    }
    comm.barrier()?;
    if me == 0 {
        rep.bytes_in_use_after = Some(alloc.bytes_in_use());
        rep.consistency = Some(match alloc.check_consistency(0) {
            Ok(stats) => format!("ok: {stats:?}"),
            Err(e) => format!("inconsistent: {e}"),
        });
    }
    report(comm, serde_json::to_value(&rep).expect("report serializes"))?;
    comm.barrier()
}

/// Ranks 1.. push `per` eager descriptors each into rank 0's queue through
/// the raw queue API while rank 0 consumes and samples slot status words.
pub fn queue_stress(comm: &mut Communicator, per: u64) -> Result<(), MpiError> {
    let me = comm.rank();
    let n = comm.size();
    let map = std::sync::Arc::clone(comm.segment());
    let q = map.queue(0);
    comm.barrier()?;
    if me != 0 {
        let mut positions = Vec::with_capacity(per as usize);
        for i in 0..per {
            loop {
                match q.enqueue(&Descriptor::eager(me, 7, 8), &i.to_le_bytes()) {
                    Ok((pos, _)) => break positions.push(pos),
                    Err(QueueError::QueueFull(_)) => std::thread::yield_now(),
                    Err(e) => return Err(e.into()),
                }
            }
        }
        report(comm, json!({ "positions": positions }))?;
        return comm.barrier();
    }
    let total = per * (n as u64 - 1);
    let cap = q.capacity();
    let key = |t: u64, st: EntryStatus| {
        if t == 0 {
            return 0;
        }
        t * 4
            + match st {
                EntryStatus::Writing => 1,
                EntryStatus::Ready => 2,
                EntryStatus::Consumed => 3,
                EntryStatus::Empty => 4,
            }
    };
    let mut last_key = vec![0u64; cap as usize];
    let mut next_val = vec![0u64; n as usize];
    let mut first_seq: Vec<Option<u64>> = vec![None; n as usize];
    let mut seen = HashSet::new();
    let (mut fifo_violations, mut cycle_violations, mut duplicate_positions) = (0u64, 0u64, 0u64);
    let mut got = 0u64;
    let deadline = Instant::now() + comm.config().op_timeout;
    while got < total {
        for slot in 0..cap {
            let (t, st) = q.peek_status(slot);
            let k = key(t, st);
            if k < last_key[slot as usize] {
                cycle_violations += 1;
            }
            last_key[slot as usize] = k;
        }
        let Some(e) = q.poll(Match::ANY) else {
            if Instant::now() > deadline {
                return Err(MpiError::Timeout("queue stress"));
            }
            std::thread::yield_now();
            continue;
        };
        let mut b = [0u8; 8];
        q.read_inline(&e, &mut b);
        let src = e.desc.src as usize;
        let base = *first_seq[src].get_or_insert(e.seq);
        if u64::from_le_bytes(b) != next_val[src] || e.seq != base + next_val[src] {
            fifo_violations += 1;
        }
        next_val[src] += 1;
        if !seen.insert(e.pos) {
            duplicate_positions += 1;
        }
        q.complete(&e)?;
        got += 1;
    }
    let mut positions: Vec<u64> = seen.into_iter().collect();
    positions.sort_unstable();
    report(
        comm,
        json!({
            "consumed": got,
            "fifo_violations": fifo_violations,
            "cycle_violations": cycle_violations,
            "duplicate_positions": duplicate_positions,
            "positions": positions,
        }),
    )?;
    comm.barrier()
}

/// Ranks 0 and 1 each send `count` blocking messages of `len` bytes to the
/// other before either receives.
pub fn mutual_sends(comm: &mut Communicator, count: u64, len: usize) -> Result<(), MpiError> {
    let me = comm.rank();
    if me < 2 {
        let peer = 1 - me;
        for i in 0..count {
            let mut data = vec![0u8; len];
            fill_pattern(&mut data, (me as u64) << 32 | i);
            comm.send(peer, 0, &data)?;
        }
        let mut bad = 0u64;
        for i in 0..count {
            let m = comm.recv(Match::exact(peer, 0))?;
            let mut want = vec![0u8; len];
            fill_pattern(&mut want, (peer as u64) << 32 | i);
            if m.payload.as_slice() != want {
                bad += 1;
            }
        }
        report(comm, json!({ "received": count, "corrupted": bad }))?;
    }
    comm.barrier()
}

/// Rank 0 sends `count` messages of `len` bytes to rank 1, either as shared
/// buffers received by reference or as plain byte sends.
pub fn copy_trace(comm: &mut Communicator, count: u64, len: usize, shared: bool) -> Result<(), MpiError> {
    match comm.rank() {
        0 => {
            for _ in 0..count {
                if shared {
                    let mut b = comm.alloc_shared(len)?;
                    b.as_mut_slice().fill(0xA5);
                    comm.send_shared(1, 3, b)?;
                } else {
                    comm.send(1, 3, &vec![0xA5; len])?;
                }
            }
        }
        1 => {
            for _ in 0..count {
                let m = if shared {
                    comm.recv_shared(Match::exact(0, 3))?
                } else {
                    comm.recv(Match::exact(0, 3))?
                };
                if m.payload.len() != len || m.payload.as_slice().iter().any(|&b| b != 0xA5) {
                    return Err(MpiError::MismatchedCounts("payload damaged".into()));
                }
            }
        }
        _ => {}
    }
    comm.barrier()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SendMode {
    Blocking,
    Nonblocking,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RecvMode {
    Blocking,
    Shared,
    Into,
    Nonblocking,
}

#[derive(Debug, Clone)]
struct PlannedMsg {
    src: u32,
    dst: u32,
    tag: i32,
    len: usize,
    key: u64,
    mode: SendMode,
}

fn random_len(rng: &mut ChaCha8Rng) -> usize {
    let k = rng.gen_range(0..=20u32);
    let lo = 1usize << k;
    (lo + rng.gen_range(0..lo)).min(1 << 20)
}

fn payload_of(key: u64, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    fill_pattern(&mut v, key);
    v
}

/// Folds a delivered message into the digest.
fn absorb(h: &mut crc32fast::Hasher, slot: u64, src: u32, tag: i32, data: &[u8]) {
    h.update(&slot.to_le_bytes());
    h.update(&src.to_le_bytes());
    h.update(&tag.to_le_bytes());
    h.update(&(data.len() as u64).to_le_bytes());
    h.update(data);
}

/// Seeded random traffic: point-to-point rounds with mixed tags, modes and
/// sizes from 1 B to 1 MiB, plus collective rounds. Every rank records a
/// digest of what it received in matched order, and counts receives that
/// matched a different message than the sequential plan predicts.
pub fn traffic_traces(comm: &mut Communicator, traces: u64, seed: u64) -> Result<(), MpiError> {
    let mut digests = Vec::with_capacity(traces as usize);
    let mut plan_mismatches = 0u64;
    for t in 0..traces {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ t);
        let mut h = crc32fast::Hasher::new();
        for round in 0..6u64 {
            let base = (t << 24) | (round << 16);
            match rng.gen_range(0..5) {
                0..=2 => plan_mismatches += p2p_round(comm, &mut rng, &mut h, base)?,
                3 => collective_round(comm, &mut rng, &mut h, base)?,
                _ => shared_round(comm, &mut rng, &mut h, base)?,
            }
            comm.barrier()?;
        }
        digests.push(format!("{:08x}", h.finalize()));
    }
    report(comm, json!({ "digests": digests, "plan_mismatches": plan_mismatches }))?;
    comm.barrier()
}

fn p2p_round(
    comm: &mut Communicator,
    rng: &mut ChaCha8Rng,
    h: &mut crc32fast::Hasher,
    base: u64,
) -> Result<u64, MpiError> {
    let n = comm.size();
    let me = comm.rank();
    let count = rng.gen_range(1..=16);
    let msgs: Vec<PlannedMsg> = (0..count)
        .map(|i| PlannedMsg {
            src: rng.gen_range(0..n),
            dst: rng.gen_range(0..n),
            tag: rng.gen_range(0..4),
            len: random_len(rng),
            key: base | i,
            mode: [SendMode::Blocking, SendMode::Nonblocking, SendMode::Shared][rng.gen_range(0..3)],
        })
        .collect();
    // receive plan per destination, simulated against per-pair FIFO order
    let mut recvs: Vec<(u32, Match, RecvMode, usize)> = Vec::new();
    for dst in 0..n {
        let mut remaining: Vec<usize> = (0..msgs.len()).filter(|&i| msgs[i].dst == dst).collect();
        while !remaining.is_empty() {
            let pick = &msgs[remaining[rng.gen_range(0..remaining.len())]];
            let single_src = remaining.iter().all(|&i| msgs[i].src == pick.src);
            let filter = match rng.gen_range(0..3) {
                0 => Match::exact(pick.src, pick.tag),
                1 => Match::new(Some(pick.src), None),
                _ if single_src => Match::new(None, Some(pick.tag)),
                _ => Match::exact(pick.src, pick.tag),
            };
            let at = remaining
                .iter()
                .position(|&i| filter.accepts(msgs[i].src, msgs[i].tag))
                .expect("picked message matches");
            let expected = remaining.remove(at);
            let mode = [RecvMode::Blocking, RecvMode::Shared, RecvMode::Into, RecvMode::Nonblocking]
                [rng.gen_range(0..4)];
            recvs.push((dst, filter, mode, expected));
        }
    }
    let mut send_reqs = Vec::new();
    for m in msgs.iter().filter(|m| m.src == me) {
        let data = payload_of(m.key, m.len);
        match m.mode {
            SendMode::Blocking => comm.send(m.dst, m.tag, &data)?,
            SendMode::Nonblocking => send_reqs.push(comm.isend(m.dst, m.tag, &data)?),
            SendMode::Shared => {
                let b = comm.copy_to_shared(&data)?;
                comm.send_shared(m.dst, m.tag, b)?;
            }
        }
    }
    let mut mismatches = 0;
    let mut pending = Vec::new();
    for (slot, (_, filter, mode, expected)) in recvs.into_iter().filter(|r| r.0 == me).enumerate() {
        let want = &msgs[expected];
        let (src, tag, data) = match mode {
            RecvMode::Blocking | RecvMode::Shared => {
                let m = if mode == RecvMode::Shared {
                    comm.recv_shared(filter)?
                } else {
                    comm.recv(filter)?
                };
                (m.status.src, m.status.tag, m.payload.as_slice().to_vec())
            }
            RecvMode::Into => {
                let mut buf = vec![0u8; want.len];
                let st = comm.recv_into(filter, &mut buf)?;
                buf.truncate(st.len);
                (st.src, st.tag, buf)
            }
            RecvMode::Nonblocking => {
                pending.push((slot, comm.irecv(filter)?, expected));
                continue;
            }
        };
        if (src, tag, &data) != (want.src, want.tag, &payload_of(want.key, want.len)) {
            mismatches += 1;
        }
        absorb(h, slot as u64, src, tag, &data);
    }
    for (slot, mut req, expected) in pending {
        let m = comm.wait_message(&mut req)?;
        let want = &msgs[expected];
        if (m.status.src, m.status.tag, m.payload.as_slice()) != (want.src, want.tag, &payload_of(want.key, want.len)[..]) {
            mismatches += 1;
        }
        absorb(h, slot as u64, m.status.src, m.status.tag, m.payload.as_slice());
    }
    comm.wait_all(&mut send_reqs)?;
    Ok(mismatches)
}

fn collective_round(
    comm: &mut Communicator,
    rng: &mut ChaCha8Rng,
    h: &mut crc32fast::Hasher,
    base: u64,
) -> Result<(), MpiError> {
    let n = comm.size();
    let me = comm.rank();
    match rng.gen_range(0..5) {
        0 => {
            let root = rng.gen_range(0..n);
            let len = random_len(rng);
            let mut buf = if me == root { payload_of(base, len) } else { Vec::new() };
            comm.bcast(root, &mut buf)?;
            absorb(h, 0, root, -1, &buf);
        }
        1 => {
            let len = rng.gen_range(1..2000);
            let mine: Vec<i64> = (0..len).map(|i| (i as i64 * 31 + me as i64 * 7) % 1001 - 500).collect();
            let op = [ReduceOp::Sum, ReduceOp::Max, ReduceOp::Min][rng.gen_range(0..3)];
            let out = comm.allreduce(&mine, op)?;
            absorb(h, 1, 0, -1, bytemuck::cast_slice(&out));
        }
        2 => {
            let root = rng.gen_range(0..n);
            let lens: Vec<usize> = (0..n).map(|_| random_len(rng) / 4).collect();
            let data = payload_of(base | me as u64, lens[me as usize]);
            if let Some(all) = comm.gather(root, &data)? {
                for (r, d) in all.iter().enumerate() {
                    absorb(h, 2, r as u32, -1, d);
                }
            }
        }
        3 => {
            // counts[src][dst]
            let counts: Vec<Vec<usize>> = (0..n)
                .map(|_| (0..n).map(|_| if rng.gen_bool(0.3) { 0 } else { random_len(rng) / 8 }).collect())
                .collect();
            let r = me as usize;
            let send_counts = counts[r].clone();
            let recv_counts: Vec<usize> = (0..n as usize).map(|s| counts[s][r]).collect();
            let send = payload_of(base | me as u64, send_counts.iter().sum());
            let mut recv = vec![0u8; recv_counts.iter().sum()];
            comm.alltoallv(
                &send,
                &send_counts,
                &displs(&send_counts),
                &mut recv,
                &recv_counts,
                &displs(&recv_counts),
            )?;
            absorb(h, 3, 0, -1, &recv);
        }
        _ => {
            let root = rng.gen_range(0..n);
            let vals: Vec<u64> = (0..64).map(|i| (me as u64 + 1) * i).collect();
            if let Some(out) = comm.reduce(root, &vals, ReduceOp::Sum)? {
                absorb(h, 4, root, -1, bytemuck::cast_slice(&out));
            }
        }
    }
    Ok(())
}

fn shared_round(
    comm: &mut Communicator,
    rng: &mut ChaCha8Rng,
    h: &mut crc32fast::Hasher,
    base: u64,
) -> Result<(), MpiError> {
    let n = comm.size();
    let me = comm.rank();
    if rng.gen_bool(0.5) {
        let root = rng.gen_range(0..n);
        let len = random_len(rng);
        let data = if me == root { payload_of(base, len) } else { Vec::new() };
        let p: Payload = comm.bcast_shared(root, &data)?;
        absorb(h, 5, root, -1, p.as_slice());
    } else {
        let lens: Vec<Vec<usize>> = (0..n)
            .map(|_| (0..n).map(|_| random_len(rng) / 2).collect())
            .collect();
        let parts = (0..n)
            .map(|d| comm.copy_to_shared(&payload_of(base | (me as u64) << 8 | d as u64, lens[me as usize][d as usize])))
            .collect::<Result<Vec<_>, _>>()?;
        for (src, p) in comm.alltoall_shared(parts)?.iter().enumerate() {
            absorb(h, 6, src as u32, -1, p.as_slice());
        }
    }
    Ok(())
}

fn displs(counts: &[usize]) -> Vec<usize> {
    let mut at = 0;
    counts
        .iter()
        .map(|&c| {
            let d = at;
            at += c;
            d
        })
        .collect()
}
