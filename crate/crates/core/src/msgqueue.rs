//! Per-rank descriptor rings: many producers, one consumer (the owner).
//!
//! Each entry carries a status word `ticket << 8 | status`, where the ticket
//! is the ring position plus one. Tagging the status with the position lets a
//! producer or the consumer tell a stale lap of the ring from the current one
//! without a separate generation field.
//!
//! ```text
//! queue header   head @0, tail @64, per-source seq counters @128 (8 B each)
//! entry (512 B)  status @0, src @8, tag @12, seq @16, kind @24, ack_slot @28,
//!                payload_len @32, region_id @40, data_off @48, msg_no @56,
//!                inline bytes @64..320
//! ```

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use thiserror::Error;

use crate::segment::{SegOffset, SegmentMap, CACHE_LINE};
use crate::shm_alloc::RegionId;

pub const ENTRY_SIZE: u64 = 512;
pub const INLINE_CAPACITY: usize = 256;
pub const NO_ACK_SLOT: u32 = u32::MAX;

const HEAD: u64 = 0;
const TAIL: u64 = CACHE_LINE;
const SEQ_COUNTERS: u64 = 2 * CACHE_LINE;

mod entry {
    pub const STATUS: u64 = 0;
    pub const SRC: u64 = 8;
    pub const TAG: u64 = 12;
    pub const SEQ: u64 = 16;
    pub const KIND: u64 = 24;
    pub const ACK_SLOT: u64 = 28;
    pub const PAYLOAD_LEN: u64 = 32;
    pub const REGION_ID: u64 = 40;
    pub const DATA_OFF: u64 = 48;
    pub const MSG_NO: u64 = 56;
    pub const INLINE: u64 = 64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum EntryStatus {
    Empty = 0,
    Writing = 1,
    Ready = 2,
    Consumed = 3,
}

impl EntryStatus {
    fn from_bits(b: u8) -> EntryStatus {
        match b & 3 {
            0 => EntryStatus::Empty,
            1 => EntryStatus::Writing,
            2 => EntryStatus::Ready,
            _ => EntryStatus::Consumed,
        }
    }
}

fn status_word(ticket: u64, status: EntryStatus) -> u64 {
    ticket << 8 | status as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Eager,
    Rendezvous,
}

/// Receive-side filter; `None` is the wildcard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Match {
    pub src: Option<u32>,
    pub tag: Option<i32>,
}

impl Match {
    pub const ANY: Match = Match {
        src: None,
        tag: None,
    };

    pub fn new(src: Option<u32>, tag: Option<i32>) -> Self {
        Match { src, tag }
    }

    pub fn exact(src: u32, tag: i32) -> Self {
        Match {
            src: Some(src),
            tag: Some(tag),
        }
    }

    pub fn accepts(&self, src: u32, tag: i32) -> bool {
        self.src.is_none_or(|s| s == src) && self.tag.is_none_or(|t| t == tag)
    }
}

/// The message descriptor fields a producer supplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Descriptor {
    pub src: u32,
    pub tag: i32,
    pub kind: PayloadKind,
    pub payload_len: u64,
    pub region: RegionId,
    pub data_off: SegOffset,
    /// Sender-side slot the receiver acknowledges into, or [`NO_ACK_SLOT`].
    pub ack_slot: u32,
    pub msg_no: u64,
}

impl Descriptor {
    pub fn eager(src: u32, tag: i32, len: usize) -> Self {
        Descriptor {
            src,
            tag,
            kind: PayloadKind::Eager,
            payload_len: len as u64,
            region: RegionId(0),
            data_off: SegOffset::NULL,
            ack_slot: NO_ACK_SLOT,
            msg_no: 0,
        }
    }

    pub fn rendezvous(src: u32, tag: i32, region: RegionId, off: SegOffset, len: u64) -> Self {
        Descriptor {
            src,
            tag,
            kind: PayloadKind::Rendezvous,
            payload_len: len,
            region,
            data_off: off,
            ack_slot: NO_ACK_SLOT,
            msg_no: 0,
        }
    }

    pub fn with_ack(mut self, slot: u32, msg_no: u64) -> Self {
        self.ack_slot = slot;
        self.msg_no = msg_no;
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueueError {
    #[error("queue of rank {0} is full")]
    QueueFull(u32),
    #[error("entry handle does not refer to a READY entry")]
    InvalidHandle,
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(&'static str),
}

/// A READY entry found by [`MessageQueue::poll`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryHandle {
    pub pos: u64,
    pub seq: u64,
    pub desc: Descriptor,
}

/// View of rank `owner`'s ring inside the segment.
#[derive(Debug, Clone, Copy)]
pub struct MessageQueue<'a> {
    seg: &'a SegmentMap,
    owner: u32,
    base: u64,
    entries: u64,
    capacity: u64,
    eager_threshold: u64,
}

impl<'a> MessageQueue<'a> {
    pub fn new(seg: &'a SegmentMap, owner: u32) -> Self {
        let l = seg.layout();
        let base = l.queue_offset(owner);
        MessageQueue {
            seg,
            owner,
            base,
            entries: base + l.queue_header,
            capacity: l.queue_capacity as u64,
            eager_threshold: seg.config().eager_threshold as u64,
        }
    }

    pub fn owner(&self) -> u32 {
        self.owner
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn head(&self) -> u64 {
        self.seg.u64_at(self.base + HEAD).load(Ordering::Acquire)
    }

    pub fn tail(&self) -> u64 {
        self.seg.u64_at(self.base + TAIL).load(Ordering::Acquire)
    }

    pub fn len(&self) -> u64 {
        self.tail() - self.head()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slot(&self, pos: u64) -> u64 {
        self.entries + (pos & (self.capacity - 1)) * ENTRY_SIZE
    }

    fn w64(&self, pos: u64, field: u64) -> &'a AtomicU64 {
        self.seg.u64_at(self.slot(pos) + field)
    }

    fn w32(&self, pos: u64, field: u64) -> &'a AtomicU32 {
        self.seg.u32_at(self.slot(pos) + field)
    }

    fn status(&self, pos: u64) -> &'a AtomicU64 {
        self.w64(pos, entry::STATUS)
    }

    /// Ticket and status currently stored in the slot for ring position `pos`.
    pub fn peek_status(&self, pos: u64) -> (u64, EntryStatus) {
        let w = self.status(pos).load(Ordering::Acquire);
        (w >> 8, EntryStatus::from_bits(w as u8))
    }

    /// Next sequence number the given source will be assigned on this queue.
    pub fn next_seq(&self, src: u32) -> u64 {
        self.seg
            .u64_at(self.base + SEQ_COUNTERS + src as u64 * 8)
            .load(Ordering::Acquire)
    }

    /// Reserves a slot, writes the descriptor and publishes it READY.
    /// Returns the ring position and the per-source sequence number.
    pub fn enqueue(&self, desc: &Descriptor, inline: &[u8]) -> Result<(u64, u64), QueueError> {
        match desc.kind {
            PayloadKind::Eager => {
                if desc.payload_len > self.eager_threshold || inline.len() as u64 != desc.payload_len {
                    return Err(QueueError::InvalidDescriptor("eager payload exceeds threshold"));
                }
            }
            PayloadKind::Rendezvous => {
                if desc.data_off.is_null() {
                    return Err(QueueError::InvalidDescriptor("rendezvous without data offset"));
                }
            }
        }
        if desc.src >= self.seg.config().n_ranks {
            return Err(QueueError::InvalidDescriptor("source rank out of range"));
        }

        let head = self.seg.u64_at(self.base + HEAD);
        let tail = self.seg.u64_at(self.base + TAIL);
        let pos = loop {
            let h = head.load(Ordering::Acquire);
            let t = tail.load(Ordering::Acquire);
            if t - h >= self.capacity {
                return Err(QueueError::QueueFull(self.owner));
            }
            if tail
                .compare_exchange_weak(t, t + 1, Ordering::AcqRel, Ordering::Relaxed)
                .is_ok()
            {
                break t;
            }
        };

        let ticket = pos + 1;
        let status = self.status(pos);
        // head passed the previous lap of this slot, so it was reset to EMPTY
        let prior = if pos >= self.capacity {
            status_word(ticket - self.capacity, EntryStatus::Empty)
        } else {
            0
        };
        debug_assert_eq!(status.load(Ordering::Acquire), prior);
        status.store(status_word(ticket, EntryStatus::Writing), Ordering::Relaxed);

        let r = Ordering::Relaxed;
        let seq = self
            .seg
            .u64_at(self.base + SEQ_COUNTERS + desc.src as u64 * 8)
            .fetch_add(1, Ordering::AcqRel);
        self.w32(pos, entry::SRC).store(desc.src, r);
        self.w32(pos, entry::TAG).store(desc.tag as u32, r);
        self.w64(pos, entry::SEQ).store(seq, r);
        self.w32(pos, entry::KIND).store(desc.kind as u32, r);
        self.w32(pos, entry::ACK_SLOT).store(desc.ack_slot, r);
        self.w64(pos, entry::PAYLOAD_LEN).store(desc.payload_len, r);
        self.w64(pos, entry::REGION_ID).store(desc.region.0, r);
        self.w64(pos, entry::DATA_OFF).store(desc.data_off.get(), r);
        self.w64(pos, entry::MSG_NO).store(desc.msg_no, r);
        if !inline.is_empty() {
            let dst = self.seg.ptr_at(self.slot(pos) + entry::INLINE);
            // SAFETY: the slot is reserved for this producer until READY is published
            unsafe { std::ptr::copy_nonoverlapping(inline.as_ptr(), dst, inline.len()) };
        }
        status.store(status_word(ticket, EntryStatus::Ready), Ordering::Release);
        Ok((pos, seq))
    }

    fn read_entry(&self, pos: u64) -> EntryHandle {
        let r = Ordering::Relaxed;
        let kind = if self.w32(pos, entry::KIND).load(r) == PayloadKind::Eager as u32 {
            PayloadKind::Eager
        } else {
            PayloadKind::Rendezvous
        };
        EntryHandle {
            pos,
            seq: self.w64(pos, entry::SEQ).load(r),
            desc: Descriptor {
                src: self.w32(pos, entry::SRC).load(r),
                tag: self.w32(pos, entry::TAG).load(r) as i32,
                kind,
                payload_len: self.w64(pos, entry::PAYLOAD_LEN).load(r),
                region: RegionId(self.w64(pos, entry::REGION_ID).load(r)),
                data_off: SegOffset(self.w64(pos, entry::DATA_OFF).load(r)),
                ack_slot: self.w32(pos, entry::ACK_SLOT).load(r),
                msg_no: self.w64(pos, entry::MSG_NO).load(r),
            },
        }
    }

    /// Lowest-position READY entry accepted by `filter`, without consuming it.
    /// Owner only.
    pub fn poll(&self, filter: Match) -> Option<EntryHandle> {
        let h = self.seg.u64_at(self.base + HEAD).load(Ordering::Relaxed);
        let t = self.tail();
        (h..t).find_map(|pos| {
            let ready = status_word(pos + 1, EntryStatus::Ready);
            if self.status(pos).load(Ordering::Acquire) != ready {
                return None;
            }
            let e = self.read_entry(pos);
            filter.accepts(e.desc.src, e.desc.tag).then_some(e)
        })
    }

    /// Copies the inline payload of an eager entry. Must precede `complete`.
    pub fn read_inline(&self, handle: &EntryHandle, dst: &mut [u8]) {
        let n = (handle.desc.payload_len as usize).min(dst.len());
        let src = self.seg.ptr_at(self.slot(handle.pos) + entry::INLINE);
        // SAFETY: a READY entry is immutable until its consumer completes it
        unsafe { std::ptr::copy_nonoverlapping(src, dst.as_mut_ptr(), n) };
    }

    /// Marks the entry CONSUMED and advances head over the consumed prefix.
    /// Owner only.
    pub fn complete(&self, handle: &EntryHandle) -> Result<(), QueueError> {
        let ticket = handle.pos + 1;
        let status = self.status(handle.pos);
        if status.load(Ordering::Acquire) != status_word(ticket, EntryStatus::Ready) {
            return Err(QueueError::InvalidHandle);
        }
        status.store(status_word(ticket, EntryStatus::Consumed), Ordering::Release);

        let head = self.seg.u64_at(self.base + HEAD);
        let t = self.tail();
        let mut h = head.load(Ordering::Relaxed);
        while h < t {
            let s = self.status(h);
            if s.load(Ordering::Acquire) != status_word(h + 1, EntryStatus::Consumed) {
                break;
            }
            s.store(status_word(h + 1, EntryStatus::Empty), Ordering::Release);
            h += 1;
        }
        head.store(h, Ordering::Release);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::{create_segment, Segment, SegmentConfig};
    use std::sync::atomic::AtomicUsize;

    static NEXT: AtomicUsize = AtomicUsize::new(0);

    fn segment(n: u32, cap: u32) -> Segment {
        let name = format!(
            "shmpi.ut-mq-{}-{}",
            std::process::id(),
            NEXT.fetch_add(1, Ordering::Relaxed)
        );
        create_segment(
            SegmentConfig::new(name, n)
                .with_total_size(8 << 20)
                .with_queue_capacity(cap)
                .with_region_rows(64),
        )
        .unwrap()
    }

    fn eager(q: &MessageQueue, src: u32, tag: i32, data: &[u8]) -> Result<(u64, u64), QueueError> {
        q.enqueue(&Descriptor::eager(src, tag, data.len()), data)
    }

    #[test]
    fn first_entry_lands_in_slot_zero() {
        let seg = segment(2, 4);
        let q = seg.queue(0);
        assert_eq!(eager(&q, 1, 0, b"8 bytes!"), Ok((0, 0)));
        assert_eq!(q.peek_status(0), (1, EntryStatus::Ready));
        let e = q.poll(Match::ANY).unwrap();
        let mut out = [0u8; 8];
        q.read_inline(&e, &mut out);
        assert_eq!(&out, b"8 bytes!");
        assert_eq!(e.desc.src, 1);
    }

    #[test]
    fn full_queue_rejects() {
        let seg = segment(2, 4);
        let q = seg.queue(1);
        for _ in 0..4 {
            eager(&q, 0, 0, &[1]).unwrap();
        }
        assert_eq!(eager(&q, 0, 0, &[1]), Err(QueueError::QueueFull(1)));
        assert_eq!(q.len(), 4);
    }

    #[test]
    fn matching_by_source_and_tag() {
        let seg = segment(4, 8);
        let q = seg.queue(0);
        eager(&q, 2, 7, &[]).unwrap();
        let e = q.poll(Match::new(None, Some(7))).unwrap();
        assert_eq!((e.desc.src, e.desc.tag), (2, 7));
        assert!(q.poll(Match::exact(1, 7)).is_none());
        q.complete(&e).unwrap();

        eager(&q, 1, 1, &[]).unwrap();
        eager(&q, 1, 2, &[]).unwrap();
        let e = q.poll(Match::new(None, Some(2))).unwrap();
        assert_eq!(e.pos, 2);
    }

    #[test]
    fn same_pair_is_fifo() {
        let seg = segment(2, 8);
        let q = seg.queue(0);
        eager(&q, 1, 0, &[10]).unwrap();
        eager(&q, 1, 0, &[20]).unwrap();
        let mut got = Vec::new();
        for _ in 0..2 {
            let e = q.poll(Match::exact(1, 0)).unwrap();
            let mut b = [0u8];
            q.read_inline(&e, &mut b);
            got.push((b[0], e.seq));
            q.complete(&e).unwrap();
        }
        assert_eq!(got, vec![(10, 0), (20, 1)]);
    }

    #[test]
    fn head_advances_over_consumed_prefix() {
        let seg = segment(2, 4);
        let q = seg.queue(0);
        eager(&q, 1, 0, &[]).unwrap();
        let only = q.poll(Match::ANY).unwrap();
        q.complete(&only).unwrap();
        assert_eq!(q.head(), q.tail());
        assert_eq!(q.peek_status(0), (1, EntryStatus::Empty));

        eager(&q, 1, 0, &[]).unwrap();
        eager(&q, 1, 1, &[]).unwrap();
        let second = q.poll(Match::new(None, Some(1))).unwrap();
        q.complete(&second).unwrap();
        assert_eq!(q.head(), 1);
        let first = q.poll(Match::ANY).unwrap();
        q.complete(&first).unwrap();
        assert_eq!(q.head(), 3);
        assert_eq!(q.complete(&first), Err(QueueError::InvalidHandle));
    }

    #[test]
    fn descriptors_validated() {
        let seg = segment(2, 4);
        let q = seg.queue(0);
        let big = vec![0u8; 300];
        assert!(matches!(eager(&q, 1, 0, &big), Err(QueueError::InvalidDescriptor(_))));
        let d = Descriptor::rendezvous(1, 0, RegionId(1 << 32), SegOffset::NULL, 10);
        assert!(matches!(q.enqueue(&d, &[]), Err(QueueError::InvalidDescriptor(_))));
        assert!(matches!(eager(&q, 5, 0, &[]), Err(QueueError::InvalidDescriptor(_))));
    }

    #[test]
    fn ring_wraps_many_laps() {
        let seg = segment(2, 4);
        let q = seg.queue(0);
        for i in 0..100u8 {
            let d = Descriptor::rendezvous(1, i as i32, RegionId(7 << 32), SegOffset(4096), 64);
            q.enqueue(&d.with_ack(3, i as u64), &[]).unwrap();
            let e = q.poll(Match::ANY).unwrap();
            assert_eq!(e.desc.tag, i as i32);
            assert_eq!(e.desc.msg_no, i as u64);
            assert_eq!(e.desc.ack_slot, 3);
            assert_eq!(e.desc.kind, PayloadKind::Rendezvous);
            q.complete(&e).unwrap();
        }
        assert_eq!(q.head(), 100);
    }

    #[test]
    fn two_producers_keep_per_source_order() {
        let seg = segment(3, 16);
        let per = 1000u32;
        std::thread::scope(|s| {
            for src in 1..3u32 {
                let seg = &seg;
                s.spawn(move || {
                    let q = seg.queue(0);
                    for i in 0..per {
                        let bytes = i.to_le_bytes();
                        while let Err(QueueError::QueueFull(_)) = eager(&q, src, 0, &bytes) {
                            std::thread::yield_now();
                        }
                    }
                });
            }
            let q = seg.queue(0);
            let mut last: [Option<(u64, u32)>; 3] = [None; 3];
            let mut drained = 0;
            while drained < 2 * per {
                let Some(e) = q.poll(Match::ANY) else {
                    std::thread::yield_now();
                    continue;
                };
                let mut b = [0u8; 4];
                q.read_inline(&e, &mut b);
                let v = u32::from_le_bytes(b);
                let src = e.desc.src as usize;
                if let Some((seq, prev)) = last[src] {
                    assert!(e.seq > seq && v == prev + 1);
                }
                last[src] = Some((e.seq, v));
                q.complete(&e).unwrap();
                drained += 1;
            }
        });
    }
}
