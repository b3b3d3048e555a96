//! MPI-like communicator over the shared segment.
//!
//! Two backends share one code path and differ only where payload bytes move:
//!
//! * [`Backend::PointerShared`] delivers rendezvous payloads by reference. A
//!   [`SharedBuf`] send enqueues a descriptor pointing at the sender's region
//!   and the receiver adopts that region without copying.
//! * [`Backend::CopyBaseline`] stages every rendezvous payload into a fresh
//!   bounce region and always copies it out on the receiving side.
//!
//! Payloads up to the eager threshold travel inline in the queue entry on both
//! backends. The copy counters charge eager bytes once, at the sender.
//!
//! Incoming descriptors are drained from the rank's queue into a local arrival
//! list by the progress engine, which runs inside every blocking call. Posted
//! receives are matched against arrivals in posting order.

mod buf;
mod collective;
mod config;
pub mod local;
mod metrics;

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::msgqueue::{Descriptor, PayloadKind, QueueError, NO_ACK_SLOT};
use crate::segment::{attach_segment_with, AttachOptions, SegOffset, Segment, SegmentError, SegmentMap};
use crate::shm_alloc::{AllocError, RegionId};
use crate::sync::{Backoff, BarrierState, SyncError};

pub use self::buf::{Payload, SharedBuf};
pub use self::collective::{ReduceOp, Reducible};
pub use self::config::*;
pub use self::metrics::{Counters, RunMetrics, METRICS_SCHEMA_VERSION};
pub use crate::msgqueue::Match;

use self::metrics::CommClock;

static NEXT_COMM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error)]
pub enum MpiError {
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error("peer rank {peer} out of range for communicator of size {size}")]
    PeerOutOfRange { peer: u32, size: u32 },
    #[error("tag {0} is reserved; user tags must be non-negative")]
    InvalidTag(i32),
    #[error("message of {len} bytes does not fit a {capacity}-byte buffer")]
    Truncation { len: usize, capacity: usize },
    #[error("timed out in {0}")]
    Timeout(&'static str),
    #[error("finalize with {0} outstanding requests")]
    FinalizeWithPending(usize),
    #[error("mismatched counts: {0}")]
    MismatchedCounts(String),
    #[error("request does not belong to this communicator")]
    ForeignRequest,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("writing metrics: {0}")]
    Io(#[from] std::io::Error),
}

/// Envelope of a completed operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Status {
    pub src: u32,
    pub tag: i32,
    pub len: usize,
}

#[derive(Debug)]
pub struct Message {
    pub status: Status,
    pub payload: Payload,
}

#[derive(Debug)]
enum Body {
    Inline(Vec<u8>),
    Region { id: RegionId, off: SegOffset },
}

/// A message drained from the queue and not yet matched.
#[derive(Debug)]
struct Arrived {
    src: u32,
    tag: i32,
    len: usize,
    body: Body,
    ack: Option<(u32, u64)>,
}

#[derive(Debug)]
enum ReqKind {
    Send { ack: (u32, u64) },
    Recv,
}

/// Handle of a nonblocking operation. Completing it more than once is a no-op
/// that returns the same status.
#[derive(Debug)]
pub struct Request {
    id: u64,
    owner: u64,
    kind: ReqKind,
    status: Option<Status>,
    payload: Option<Payload>,
}

impl Request {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn is_send(&self) -> bool {
        matches!(self.kind, ReqKind::Send { .. })
    }

    pub fn is_complete(&self) -> bool {
        self.status.is_some()
    }

    pub fn status(&self) -> Option<Status> {
        self.status
    }

    /// Body of a completed receive; `None` before completion or once taken.
    pub fn take_payload(&mut self) -> Option<Payload> {
        self.payload.take()
    }
}

#[derive(Debug)]
struct PendingRecv {
    id: u64,
    filter: Match,
    internal: bool,
    by_ref: bool,
}

enum Outgoing<'d> {
    Bytes(&'d [u8]),
    Shared(SharedBuf),
}

/// One rank's endpoint. All calls must come from a single thread.
pub struct Communicator {
    cfg: JobConfig,
    seg: Segment,
    map: Arc<SegmentMap>,
    rank: u32,
    size: u32,
    eager_threshold: usize,
    counters: Counters,
    clock: CommClock,
    barrier_state: Option<BarrierState>,
    started: Instant,
    arrived: VecDeque<Arrived>,
    pending: Vec<PendingRecv>,
    completed: HashMap<u64, Message>,
    id: u64,
    ack_free: Vec<u32>,
    ack_outstanding: Vec<(u32, u64)>,
    next_msg_no: u64,
    next_req: u64,
    coll_seq: u64,
    events: u64,
}

impl std::fmt::Debug for Communicator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Communicator")
            .field("rank", &self.rank)
            .field("size", &self.size)
            .field("backend", &self.cfg.backend)
            .field("segment", &self.seg.name())
            .finish()
    }
}

impl Communicator {
    /// Attaches to the job segment and runs the startup barrier.
    pub fn init(cfg: JobConfig) -> Result<Communicator, MpiError> {
        cfg.polling.validate()?;
        let opts = AttachOptions {
            prefault: cfg.prefault,
            ..Default::default()
        };
        let seg = attach_segment_with(&cfg.segment_name(), cfg.rank, opts)?;
        let seg_ranks = seg.config().n_ranks;
        if seg_ranks != cfg.n_ranks {
            return Err(MpiError::Config(format!(
                "job expects {} ranks but the segment was created for {seg_ranks}",
                cfg.n_ranks
            )));
        }
        let map = Arc::clone(seg.map());
        let slots = map.layout().ack_slots_per_rank as u32;
        let mut comm = Communicator {
            rank: cfg.rank,
            size: cfg.n_ranks,
            eager_threshold: map.config().eager_threshold as usize,
            barrier_state: Some(map.barrier().participant()),
            cfg,
            seg,
            map,
            counters: Counters::default(),
            clock: CommClock::default(),
            started: Instant::now(),
            arrived: VecDeque::new(),
            pending: Vec::new(),
            completed: HashMap::new(),
            id: NEXT_COMM_ID.fetch_add(1, Ordering::Relaxed),
            ack_free: (0..slots).rev().collect(),
            ack_outstanding: Vec::new(),
            next_msg_no: 1,
            next_req: 1,
            coll_seq: 0,
            events: 0,
        };
        comm.barrier_inner()?;
        comm.started = Instant::now();
        Ok(comm)
    }

    /// Joins a job described by the launcher environment.
    pub fn init_from_env() -> Result<Communicator, MpiError> {
        Communicator::init(JobConfig::from_env()?)
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn backend(&self) -> Backend {
        self.cfg.backend
    }

    pub fn config(&self) -> &JobConfig {
        &self.cfg
    }

    pub fn segment(&self) -> &Arc<SegmentMap> {
        &self.map
    }

    pub fn eager_threshold(&self) -> usize {
        self.eager_threshold
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn wall_time(&self) -> Duration {
        self.started.elapsed()
    }

    /// Snapshot of the metrics record as it would be written now.
    pub fn metrics(&self) -> RunMetrics {
        let mut m = RunMetrics::from_counters(
            self.rank,
            self.cfg.backend.as_str(),
            &self.counters,
            self.started.elapsed(),
        );
        m.knobs = self.knobs();
        m
    }

    fn knobs(&self) -> std::collections::BTreeMap<String, String> {
        let c = self.map.config();
        [
            ("n_ranks", self.size.to_string()),
            ("backend", self.cfg.backend.to_string()),
            ("seg_size", c.total_size.to_string()),
            ("queue_cap", c.queue_capacity.to_string()),
            ("eager", c.eager_threshold.to_string()),
            ("isend_barrier", self.cfg.isend_barrier.to_string()),
            ("baseline_latency_ns", self.cfg.baseline_latency_ns.to_string()),
            ("prefault", self.cfg.prefault.to_string()),
            ("spin_limit", self.cfg.polling.spin_limit.to_string()),
            ("timeout_ms", self.cfg.op_timeout.as_millis().to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn timed<T>(&mut self, f: impl FnOnce(&mut Self) -> T) -> T {
        self.clock.enter();
        let out = f(self);
        self.counters.comm_time_ns += self.clock.leave();
        out
    }

    fn check_peer(&self, peer: u32) -> Result<(), MpiError> {
        if peer >= self.size {
            return Err(MpiError::PeerOutOfRange {
                peer,
                size: self.size,
            });
        }
        Ok(())
    }

    fn check_tag(tag: i32) -> Result<(), MpiError> {
        if tag < 0 {
            return Err(MpiError::InvalidTag(tag));
        }
        Ok(())
    }

    fn check_filter(&self, filter: Match) -> Result<(), MpiError> {
        if let Some(src) = filter.src {
            self.check_peer(src)?;
        }
        if let Some(tag) = filter.tag {
            Self::check_tag(tag)?;
        }
        Ok(())
    }

    /// Runs the progress engine until `step` yields a value or the operation
    /// timeout passes.
    fn block_on<T>(
        &mut self,
        what: &'static str,
        mut step: impl FnMut(&mut Self) -> Result<Option<T>, MpiError>,
    ) -> Result<T, MpiError> {
        let policy = self.cfg.polling;
        let deadline = Instant::now() + self.cfg.op_timeout;
        let mut backoff = Backoff::new(&policy).with_deadline(Some(deadline));
        loop {
            self.progress()?;
            if let Some(v) = step(self)? {
                return Ok(v);
            }
            backoff.observe(self.events);
            backoff
                .snooze()
                .map_err(|_| MpiError::Timeout(what))?;
        }
    }

    /// Drains this rank's queue into the arrival list and matches posted
    /// receives in posting order. Returns the number of entries drained.
    fn progress(&mut self) -> Result<usize, MpiError> {
        let map = Arc::clone(&self.map);
        let q = map.queue(self.rank);
        let mut drained = 0;
        while let Some(e) = q.poll(Match::ANY) {
            let d = e.desc;
            let len = d.payload_len as usize;
            let body = match d.kind {
                PayloadKind::Eager => {
                    let mut v = vec![0u8; len];
                    q.read_inline(&e, &mut v);
                    Body::Inline(v)
                }
                PayloadKind::Rendezvous => Body::Region {
                    id: d.region,
                    off: d.data_off,
                },
            };
            q.complete(&e)?;
            self.arrived.push_back(Arrived {
                src: d.src,
                tag: d.tag,
                len,
                body,
                ack: (d.ack_slot != NO_ACK_SLOT).then_some((d.ack_slot, d.msg_no)),
            });
            drained += 1;
        }
        self.events += drained as u64;
        self.match_pending()?;
        Ok(drained)
    }

    fn match_pending(&mut self) -> Result<(), MpiError> {
        let mut i = 0;
        while i < self.pending.len() && !self.arrived.is_empty() {
            let p = &self.pending[i];
            match self.find_arrived(p.filter, p.internal) {
                Some(at) => {
                    let p = self.pending.remove(i);
                    let a = self.arrived.remove(at).expect("index from find");
                    let msg = self.deliver(a, p.by_ref)?;
                    self.completed.insert(p.id, msg);
                    self.events += 1;
                }
                None => i += 1,
            }
        }
        Ok(())
    }

    fn find_arrived(&self, filter: Match, internal: bool) -> Option<usize> {
        self.arrived
            .iter()
            .position(|a| (internal || a.tag >= 0) && filter.accepts(a.src, a.tag))
    }

    /// Completes a matched message: acknowledges it to the sender and turns
    /// the body into a payload, copying only when the backend or the caller
    /// requires local bytes.
    fn deliver(&mut self, a: Arrived, by_ref: bool) -> Result<Message, MpiError> {
        self.acknowledge(&a);
        let status = Status {
            src: a.src,
            tag: a.tag,
            len: a.len,
        };
        let payload = match a.body {
            Body::Inline(v) => Payload::Bytes(v),
            Body::Region { id, off } => {
                if by_ref && self.cfg.backend == Backend::PointerShared {
                    Payload::Shared(SharedBuf::adopt(Arc::clone(&self.map), id, off, a.len, self.rank))
                } else {
                    let mut v = vec![0u8; a.len];
                    self.copy_out(id, off, &mut v)?;
                    Payload::Bytes(v)
                }
            }
        };
        Ok(Message { status, payload })
    }

    fn acknowledge(&mut self, a: &Arrived) {
        self.counters.messages_received += 1;
        if let Some((slot, msg_no)) = a.ack {
            let word = self.map.layout().ack_word(a.src, slot as u64);
            self.map.u64_at(word).fetch_max(msg_no, Ordering::Release);
        }
    }

    /// Copies a region into `dst` and drops the message's reference to it.
    fn copy_out(&mut self, id: RegionId, off: SegOffset, dst: &mut [u8]) -> Result<(), MpiError> {
        self.map.resolve(off, dst.len() as u64)?.copy_to(dst);
        self.counters.rendezvous_bytes_copied += dst.len() as u64;
        self.map.allocator().decref(id, self.rank)?;
        Ok(())
    }

    fn release_body(&self, body: Body) {
        if let Body::Region { id, .. } = body {
            let _ = self.map.allocator().decref(id, self.rank);
        }
    }

    fn alloc_region(&mut self, len: usize) -> Result<(RegionId, SegOffset), MpiError> {
        let heap = self.map.layout().heap_size;
        if len as u64 > heap {
            return Err(AllocError::OutOfSharedMemory {
                requested: len as u64,
            }
            .into());
        }
        let map = Arc::clone(&self.map);
        let alloc = map.allocator().with_policy(self.cfg.polling);
        let rank = self.rank;
        // the heap drains as peers consume; keep our own queue moving meanwhile
        self.block_on("shared heap allocation", |_| match alloc.malloc(len as u64, rank) {
            Ok(r) => Ok(Some(r)),
            Err(AllocError::OutOfSharedMemory { .. } | AllocError::RegionTableFull) => Ok(None),
            Err(e) => Err(e.into()),
        })
    }

    /// A fresh region of `len` bytes owned by this rank.
    pub fn alloc_shared(&mut self, len: usize) -> Result<SharedBuf, MpiError> {
        if len == 0 {
            return Ok(SharedBuf::empty(Arc::clone(&self.map), self.rank));
        }
        let (id, off) = self.alloc_region(len)?;
        Ok(SharedBuf::adopt(Arc::clone(&self.map), id, off, len, self.rank))
    }

    /// Stages local bytes into a fresh region. The copy is charged to this
    /// rank like any other staging copy.
    pub fn copy_to_shared(&mut self, data: &[u8]) -> Result<SharedBuf, MpiError> {
        let mut buf = self.alloc_shared(data.len())?;
        buf.as_mut_slice().copy_from_slice(data);
        self.counters.rendezvous_bytes_copied += data.len() as u64;
        Ok(buf)
    }

    fn take_ack_slot(&mut self) -> Result<(u32, u64), MpiError> {
        let map = Arc::clone(&self.map);
        let rank = self.rank;
        let acked = |slot: u32, no: u64| {
            let word = map.layout().ack_word(rank, slot as u64);
            map.u64_at(word).load(Ordering::Acquire) >= no
        };
        let slot = self.block_on("isend slot", |c| {
            if let Some(s) = c.ack_free.pop() {
                return Ok(Some(s));
            }
            let mut freed = Vec::new();
            c.ack_outstanding.retain(|&(s, no)| {
                let done = acked(s, no);
                if done {
                    freed.push(s);
                }
                !done
            });
            c.ack_free.extend(freed);
            Ok(c.ack_free.pop())
        })?;
        let no = self.next_msg_no;
        self.next_msg_no += 1;
        self.ack_outstanding.push((slot, no));
        Ok((slot, no))
    }

    fn is_acked(&self, (slot, msg_no): (u32, u64)) -> bool {
        let word = self.map.layout().ack_word(self.rank, slot as u64);
        self.map.u64_at(word).load(Ordering::Acquire) >= msg_no
    }

    fn inject_latency(&self) {
        if self.cfg.backend == Backend::CopyBaseline && self.cfg.baseline_latency_ns > 0 {
            let d = Duration::from_nanos(self.cfg.baseline_latency_ns);
            let t = Instant::now();
            while t.elapsed() < d {
                std::hint::spin_loop();
            }
        }
    }

    /// Places one message in `dst`'s queue. Returns once the descriptor is
    /// READY; the receiver may not have seen it yet.
    fn post(
        &mut self,
        dst: u32,
        tag: i32,
        data: Outgoing<'_>,
        ack: Option<(u32, u64)>,
    ) -> Result<(), MpiError> {
        self.check_peer(dst)?;
        self.inject_latency();
        let by_ref = self.cfg.backend == Backend::PointerShared;
        let mut inline: Option<Vec<u8>> = None;
        let mut desc = match data {
            Outgoing::Shared(buf) if buf.is_empty() => Descriptor::eager(self.rank, tag, 0),
            Outgoing::Shared(buf) if by_ref => {
                let (id, off, len) = buf.into_raw();
                Descriptor::rendezvous(self.rank, tag, id, off, len as u64)
            }
            Outgoing::Shared(buf) => return self.post(dst, tag, Outgoing::Bytes(buf.as_slice()), ack),
            Outgoing::Bytes(b) if b.len() <= self.eager_threshold => {
                self.counters.eager_bytes_copied += b.len() as u64;
                inline = Some(b.to_vec());
                Descriptor::eager(self.rank, tag, b.len())
            }
            Outgoing::Bytes(b) => {
                let (id, off) = self.alloc_region(b.len())?;
                self.map.resolve(off, b.len() as u64)?.copy_from(b);
                self.counters.rendezvous_bytes_copied += b.len() as u64;
                Descriptor::rendezvous(self.rank, tag, id, off, b.len() as u64)
            }
        };
        if let Some((slot, no)) = ack {
            desc = desc.with_ack(slot, no);
        }
        self.counters.messages_sent += 1;

        if dst == self.rank {
            let body = match desc.kind {
                PayloadKind::Eager => Body::Inline(inline.unwrap_or_default()),
                PayloadKind::Rendezvous => Body::Region {
                    id: desc.region,
                    off: desc.data_off,
                },
            };
            self.arrived.push_back(Arrived {
                src: self.rank,
                tag,
                len: desc.payload_len as usize,
                body,
                ack,
            });
            self.events += 1;
            return self.match_pending();
        }

        let map = Arc::clone(&self.map);
        let q = map.queue(dst);
        let bytes = inline.as_deref().unwrap_or(&[]);
        let sent = self.block_on("enqueue", |_| match q.enqueue(&desc, bytes) {
            Ok(_) => Ok(Some(())),
            Err(QueueError::QueueFull(_)) => Ok(None),
            Err(e) => Err(e.into()),
        });
        if sent.is_err() && desc.kind == PayloadKind::Rendezvous {
            let _ = map.allocator().decref(desc.region, self.rank);
        }
        sent
    }

    fn new_request(&mut self, kind: ReqKind) -> Request {
        let id = self.next_req;
        self.next_req += 1;
        Request {
            id,
            owner: self.id,
            kind,
            status: None,
            payload: None,
        }
    }

    /// Blocking send of local bytes.
    pub fn send(&mut self, dst: u32, tag: i32, data: &[u8]) -> Result<(), MpiError> {
        Self::check_tag(tag)?;
        self.timed(|c| c.post(dst, tag, Outgoing::Bytes(data), None))
    }

    /// Blocking send of a shared buffer; by reference on the pointer backend.
    pub fn send_shared(&mut self, dst: u32, tag: i32, buf: SharedBuf) -> Result<(), MpiError> {
        Self::check_tag(tag)?;
        self.timed(|c| c.post(dst, tag, Outgoing::Shared(buf), None))
    }

    fn isend_inner(&mut self, dst: u32, tag: i32, data: Outgoing<'_>) -> Result<Request, MpiError> {
        Self::check_tag(tag)?;
        self.check_peer(dst)?;
        self.timed(|c| {
            let ack = c.take_ack_slot()?;
            let len = match &data {
                Outgoing::Bytes(b) => b.len(),
                Outgoing::Shared(b) => b.len(),
            };
            c.post(dst, tag, data, Some(ack))?;
            let req = c.new_request(ReqKind::Send { ack });
            // kept until wait reports it
            c.completed.insert(
                req.id,
                Message {
                    status: Status { src: c.rank, tag, len },
                    payload: Payload::Bytes(Vec::new()),
                },
            );
            Ok(req)
        })
    }

    /// Nonblocking send; `wait` returns once the receiver has matched it.
    pub fn isend(&mut self, dst: u32, tag: i32, data: &[u8]) -> Result<Request, MpiError> {
        self.isend_inner(dst, tag, Outgoing::Bytes(data))
    }

    pub fn isend_shared(&mut self, dst: u32, tag: i32, buf: SharedBuf) -> Result<Request, MpiError> {
        self.isend_inner(dst, tag, Outgoing::Shared(buf))
    }

    fn recv_arrived(&mut self, filter: Match, internal: bool) -> Result<Arrived, MpiError> {
        self.block_on("recv", |c| {
            Ok(c.find_arrived(filter, internal)
                .and_then(|i| c.arrived.remove(i)))
        })
    }

    fn recv_inner(&mut self, filter: Match, internal: bool, by_ref: bool) -> Result<Message, MpiError> {
        let a = self.recv_arrived(filter, internal)?;
        self.deliver(a, by_ref)
    }

    /// Blocking receive into a fresh local buffer.
    pub fn recv(&mut self, filter: Match) -> Result<Message, MpiError> {
        self.check_filter(filter)?;
        self.timed(|c| c.recv_inner(filter, false, false))
    }

    /// Blocking receive that keeps rendezvous payloads in place on the
    /// pointer backend.
    pub fn recv_shared(&mut self, filter: Match) -> Result<Message, MpiError> {
        self.check_filter(filter)?;
        self.timed(|c| c.recv_inner(filter, false, true))
    }

    /// Blocking receive into a caller buffer.
    pub fn recv_into(&mut self, filter: Match, dst: &mut [u8]) -> Result<Status, MpiError> {
        self.check_filter(filter)?;
        self.timed(|c| {
            let a = c.recv_arrived(filter, false)?;
            c.acknowledge(&a);
            let status = Status {
                src: a.src,
                tag: a.tag,
                len: a.len,
            };
            if a.len > dst.len() {
                c.release_body(a.body);
                return Err(MpiError::Truncation {
                    len: a.len,
                    capacity: dst.len(),
                });
            }
            match a.body {
                Body::Inline(v) => dst[..v.len()].copy_from_slice(&v),
                Body::Region { id, off } => c.copy_out(id, off, &mut dst[..a.len])?,
            }
            Ok(status)
        })
    }

    fn irecv_inner(&mut self, filter: Match, by_ref: bool) -> Result<Request, MpiError> {
        self.check_filter(filter)?;
        self.timed(|c| {
            let req = c.new_request(ReqKind::Recv);
            c.pending.push(PendingRecv {
                id: req.id,
                filter,
                internal: false,
                by_ref,
            });
            c.progress()?;
            Ok(req)
        })
    }

    pub fn irecv(&mut self, filter: Match) -> Result<Request, MpiError> {
        self.irecv_inner(filter, false)
    }

    pub fn irecv_shared(&mut self, filter: Match) -> Result<Request, MpiError> {
        self.irecv_inner(filter, true)
    }

    fn check_owner(&self, req: &Request) -> Result<(), MpiError> {
        if req.owner != self.id {
            return Err(MpiError::ForeignRequest);
        }
        Ok(())
    }

    fn try_complete(&mut self, req: &mut Request) -> Result<bool, MpiError> {
        if req.status.is_some() {
            return Ok(true);
        }
        match req.kind {
            ReqKind::Send { ack } => {
                if !self.is_acked(ack) {
                    return Ok(false);
                }
                let msg = self.completed.remove(&req.id).expect("isend record");
                req.status = Some(msg.status);
            }
            ReqKind::Recv => {
                let Some(msg) = self.completed.remove(&req.id) else {
                    return Ok(false);
                };
                req.status = Some(msg.status);
                req.payload = Some(msg.payload);
            }
        }
        Ok(true)
    }

    /// Blocks until the request completes.
    pub fn wait(&mut self, req: &mut Request) -> Result<Status, MpiError> {
        self.check_owner(req)?;
        if let Some(s) = req.status {
            return Ok(s);
        }
        self.timed(|c| {
            c.block_on("wait", |c| c.try_complete(req).map(|done| done.then_some(())))?;
            if req.is_send() && c.cfg.isend_barrier {
                c.barrier_inner()?;
            }
            Ok(req.status.expect("completed"))
        })
    }

    /// Waits for a receive request and returns its message.
    pub fn wait_message(&mut self, req: &mut Request) -> Result<Message, MpiError> {
        let status = self.wait(req)?;
        let payload = req.take_payload().unwrap_or(Payload::Bytes(Vec::new()));
        Ok(Message { status, payload })
    }

    pub fn wait_all(&mut self, reqs: &mut [Request]) -> Result<Vec<Status>, MpiError> {
        reqs.iter_mut().map(|r| self.wait(r)).collect()
    }

    /// One progress step; true if the request has completed.
    pub fn test(&mut self, req: &mut Request) -> Result<bool, MpiError> {
        self.check_owner(req)?;
        self.timed(|c| {
            c.progress()?;
            c.try_complete(req)
        })
    }

    pub(crate) fn barrier_inner(&mut self) -> Result<(), MpiError> {
        let map = Arc::clone(&self.map);
        let barrier = map.barrier();
        let mut state = self.barrier_state.take().expect("barrier state present");
        let policy = self.cfg.polling;
        let mut failed = None;
        let res = barrier.wait_with_progress(
            &mut state,
            &policy,
            Some(self.cfg.barrier_timeout),
            || {
                if failed.is_none() {
                    if let Err(e) = self.progress() {
                        failed = Some(e);
                    }
                }
                self.events
            },
        );
        self.barrier_state = Some(state);
        res?;
        if let Some(e) = failed {
            return Err(e);
        }
        self.counters.barrier_count += 1;
        Ok(())
    }

    pub fn barrier(&mut self) -> Result<(), MpiError> {
        self.timed(|c| c.barrier_inner())
    }

    /// Posted receives plus requests completed but never waited on.
    fn outstanding(&self) -> usize {
        self.pending.len() + self.completed.len()
    }

    /// Runs the teardown barrier and emits the metrics record.
    pub fn finalize(mut self) -> Result<RunMetrics, MpiError> {
        let open = self.outstanding();
        if open > 0 {
            return Err(MpiError::FinalizeWithPending(open));
        }
        let mut metrics = self.metrics();
        self.barrier_inner()?;
        metrics.barrier_count = self.counters.barrier_count;
        if let Some(dir) = &self.cfg.metrics_dir {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(RunMetrics::file_name(self.rank));
            let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
            std::fs::write(path, json)?;
        }
        Ok(metrics)
    }
}

impl Drop for Communicator {
    fn drop(&mut self) {
        let _ = self.progress();
        for a in std::mem::take(&mut self.arrived) {
            self.release_body(a.body);
        }
        self.completed.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_tags_rejected() {
        assert!(matches!(Communicator::check_tag(-1), Err(MpiError::InvalidTag(-1))));
        assert!(Communicator::check_tag(0).is_ok());
    }
}
