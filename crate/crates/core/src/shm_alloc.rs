//! Shared heap allocator and the region metadata table.
//!
//! The heap is a first-fit, address-ordered free list with 64-byte blocks.
//! Each allocation gets a row in a fixed table of [`REGION_ROW_SIZE`]-byte
//! records holding the region id, extent, owner and reference count.
//!
//! Region ids are `seq << 32 | row` where `seq` is a job-wide counter, so ids
//! grow monotonically and are never reused even though rows are. The
//! refcount word packs the low 32 bits of `seq` next to the count, which lets
//! incref/decref detect a recycled row with a single CAS.
//!
//! Metadata mutation (malloc, the final free) runs under the segment
//! [`MetaLock`](crate::sync::MetaLock); refcount changes are lock-free.

use std::fmt;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::segment::{hdr, round_up, SegOffset, SegmentMap, CACHE_LINE};
use crate::sync::{MetaLockGuard, PollingPolicy, SyncError};

pub const REGION_ROW_SIZE: u64 = 64;
pub const BLOCK_ALIGN: u64 = CACHE_LINE;

const NO_ROW: u32 = u32::MAX;
const LOCK_TIMEOUT: Duration = Duration::from_secs(30);

mod row {
    pub const ID: u64 = 0;
    pub const OFFSET: u64 = 8;
    pub const LENGTH: u64 = 16;
    pub const BLOCK_LEN: u64 = 24;
    pub const RC_WORD: u64 = 32;
    pub const OWNER: u64 = 40;
    pub const STATE: u64 = 44;
    pub const NEXT_FREE: u64 = 48;
}

const STATE_FREE: u32 = 0;
const STATE_LIVE: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct RegionId(pub u64);

impl RegionId {
    pub fn row(self) -> u32 {
        self.0 as u32
    }

    pub fn seq(self) -> u64 {
        self.0 >> 32
    }

    fn tag(self) -> u32 {
        self.seq() as u32
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "region#{}:{}", self.seq(), self.row())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionState {
    Free,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionMetadata {
    pub region_id: RegionId,
    pub offset: SegOffset,
    pub length: u64,
    pub refcount: u32,
    pub owner_rank: u32,
    pub state: RegionState,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AllocError {
    #[error("allocation size must be positive")]
    ZeroSize,
    #[error("shared heap exhausted: requested {requested} bytes")]
    OutOfSharedMemory { requested: u64 },
    #[error("region metadata table is full")]
    RegionTableFull,
    #[error("no such region {0}")]
    NoSuchRegion(RegionId),
    #[error("{0} was already freed")]
    RegionFreed(RegionId),
    #[error("refcount underflow on {0}")]
    UnderflowDetected(RegionId),
    #[error("metadata lock: {0}")]
    Sync(#[from] SyncError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AllocStats {
    pub heap_size: u64,
    pub bytes_in_use: u64,
    pub high_water: u64,
    pub free_bytes: u64,
    pub free_blocks: u64,
    pub live_regions: u64,
    pub allocations: u64,
    pub frees: u64,
}

impl AllocStats {
    /// Bytes lost to block rounding in live regions.
    pub fn padding(&self) -> u64 {
        self.heap_size - self.bytes_in_use - self.free_bytes
    }
}

/// Initial heap state: one free block spanning the heap.
pub(crate) fn format_heap(seg: &SegmentMap) {
    let l = seg.layout();
    let r = Ordering::Relaxed;
    seg.u64_at(l.heap_off).store(l.heap_size, r);
    seg.u64_at(l.heap_off + 8).store(0, r);
    seg.u64_at(hdr::ALLOC_FREE_HEAD).store(l.heap_off, r);
    seg.u64_at(hdr::ALLOC_NEXT_SEQ).store(1, r);
    seg.u32_at(hdr::ALLOC_FREE_ROW).store(NO_ROW, r);
    seg.u32_at(hdr::ALLOC_ROWS_USED).store(0, r);
}

/// Allocator view over one mapping.
#[derive(Debug, Clone, Copy)]
pub struct ShmAllocator<'a> {
    seg: &'a SegmentMap,
    policy: PollingPolicy,
}

impl<'a> ShmAllocator<'a> {
    pub fn new(seg: &'a SegmentMap) -> Self {
        ShmAllocator {
            seg,
            policy: PollingPolicy::default(),
        }
    }

    pub fn with_policy(mut self, policy: PollingPolicy) -> Self {
        self.policy = policy;
        self
    }

    fn lock(&self, rank: u32) -> Result<MetaLockGuard<'a>, AllocError> {
        let deadline = Some(Instant::now() + LOCK_TIMEOUT);
        Ok(self.seg.meta_lock().guard(rank, &self.policy, deadline)?)
    }

    fn word(&self, off: u64) -> &'a AtomicU64 {
        self.seg.u64_at(off)
    }

    fn word32(&self, off: u64) -> &'a AtomicU32 {
        self.seg.u32_at(off)
    }

    fn row_word(&self, row: u32, field: u64) -> &'a AtomicU64 {
        self.word(self.seg.layout().region_row(row) + field)
    }

    fn row_word32(&self, row: u32, field: u64) -> &'a AtomicU32 {
        self.word32(self.seg.layout().region_row(row) + field)
    }

    /// Allocates a LIVE region with refcount 1 owned by `rank`.
    pub fn malloc(&self, size: u64, rank: u32) -> Result<(RegionId, SegOffset), AllocError> {
        if size == 0 {
            return Err(AllocError::ZeroSize);
        }
        let oom = AllocError::OutOfSharedMemory { requested: size };
        if size > self.seg.layout().heap_size {
            return Err(oom);
        }
        let need = round_up(size, BLOCK_ALIGN);
        let r = Ordering::Relaxed;
        let _guard = self.lock(rank)?;

        let free_row = self.word32(hdr::ALLOC_FREE_ROW).load(r);
        let rows_used = self.word32(hdr::ALLOC_ROWS_USED).load(r);
        if free_row == NO_ROW && rows_used >= self.seg.layout().region_rows {
            return Err(AllocError::RegionTableFull);
        }

        let mut link = hdr::ALLOC_FREE_HEAD;
        let mut cur = self.word(link).load(r);
        let (offset, block_len) = loop {
            if cur == 0 {
                return Err(oom);
            }
            let bsize = self.word(cur).load(r);
            let next = self.word(cur + 8).load(r);
            if bsize >= need {
                if bsize - need >= BLOCK_ALIGN {
                    let rest = cur + need;
                    self.word(rest).store(bsize - need, r);
                    self.word(rest + 8).store(next, r);
                    self.word(link).store(rest, r);
                    break (cur, need);
                }
                self.word(link).store(next, r);
                break (cur, bsize);
            }
            link = cur + 8;
            cur = next;
        };

        let row = if free_row != NO_ROW {
            let next = self.row_word32(free_row, row::NEXT_FREE).load(r);
            self.word32(hdr::ALLOC_FREE_ROW).store(next, r);
            free_row
        } else {
            self.word32(hdr::ALLOC_ROWS_USED)
                .store(rows_used + 1, Ordering::Release);
            rows_used
        };
        let seq = self.word(hdr::ALLOC_NEXT_SEQ).fetch_add(1, Ordering::AcqRel);
        let id = RegionId(seq << 32 | row as u64);

        self.row_word(row, row::ID).store(id.0, r);
        self.row_word(row, row::OFFSET).store(offset, r);
        self.row_word(row, row::LENGTH).store(size, r);
        self.row_word(row, row::BLOCK_LEN).store(block_len, r);
        self.row_word32(row, row::OWNER).store(rank, r);
        self.row_word32(row, row::STATE).store(STATE_LIVE, r);
        self.row_word(row, row::RC_WORD)
            .store((id.tag() as u64) << 32 | 1, Ordering::Release);

        let in_use = self.word(hdr::ALLOC_BYTES_IN_USE).fetch_add(size, r) + size;
        self.word(hdr::ALLOC_HIGH_WATER).fetch_max(in_use, r);
        self.word(hdr::ALLOC_LIVE).fetch_add(1, r);
        self.word(hdr::ALLOC_COUNT).fetch_add(1, r);
        Ok((id, SegOffset(offset)))
    }

    fn row_in_use(&self, id: RegionId) -> bool {
        id.seq() != 0 && id.row() < self.word32(hdr::ALLOC_ROWS_USED).load(Ordering::Acquire)
    }

    fn issued(&self, id: RegionId) -> bool {
        id.seq() < self.word(hdr::ALLOC_NEXT_SEQ).load(Ordering::Acquire)
    }

    pub fn incref(&self, id: RegionId) -> Result<u32, AllocError> {
        if !self.row_in_use(id) {
            return Err(AllocError::NoSuchRegion(id));
        }
        let rc = self.row_word(id.row(), row::RC_WORD);
        let mut w = rc.load(Ordering::Acquire);
        loop {
            if (w >> 32) as u32 != id.tag() {
                return Err(if self.issued(id) {
                    AllocError::RegionFreed(id)
                } else {
                    AllocError::NoSuchRegion(id)
                });
            }
            let count = w as u32;
            if count == 0 {
                return Err(AllocError::RegionFreed(id));
            }
            match rc.compare_exchange_weak(w, w + 1, Ordering::AcqRel, Ordering::Acquire) {
                Ok(_) => return Ok(count + 1),
                Err(now) => w = now,
            }
        }
    }

    /// Drops one reference; the last one returns the bytes to the heap.
    /// `rank` is only used to take the metadata lock for that final free.
    pub fn decref(&self, id: RegionId, rank: u32) -> Result<u32, AllocError> {
        if !self.row_in_use(id) {
            return Err(AllocError::NoSuchRegion(id));
        }
        let rc = self.row_word(id.row(), row::RC_WORD);
        let mut w = rc.load(Ordering::Acquire);
        let remaining = loop {
            if (w >> 32) as u32 != id.tag() {
                return Err(if self.issued(id) {
                    AllocError::UnderflowDetected(id)
                } else {
                    AllocError::NoSuchRegion(id)
                });
            }
            let count = w as u32;
            if count == 0 {
                return Err(AllocError::UnderflowDetected(id));
            }
            match rc.compare_exchange_weak(w, w - 1, Ordering::AcqRel, Ordering::Acquire) {
                Ok(_) => break count - 1,
                Err(now) => w = now,
            }
        };
        if remaining == 0 {
            self.release(id, rank)?;
        }
        Ok(remaining)
    }

    fn release(&self, id: RegionId, rank: u32) -> Result<(), AllocError> {
        let r = Ordering::Relaxed;
        let _guard = self.lock(rank)?;
        let row_idx = id.row();
        debug_assert_eq!(self.row_word(row_idx, row::ID).load(r), id.0);
        let off = self.row_word(row_idx, row::OFFSET).load(r);
        let len = self.row_word(row_idx, row::BLOCK_LEN).load(r);
        let size = self.row_word(row_idx, row::LENGTH).load(r);
        self.row_word32(row_idx, row::STATE).store(STATE_FREE, r);

        let mut link = hdr::ALLOC_FREE_HEAD;
        let mut prev = 0u64;
        let mut cur = self.word(link).load(r);
        while cur != 0 && cur < off {
            prev = cur;
            link = cur + 8;
            cur = self.word(cur + 8).load(r);
        }
        let mut new_size = len;
        let mut new_next = cur;
        if cur != 0 && off + len == cur {
            new_size += self.word(cur).load(r);
            new_next = self.word(cur + 8).load(r);
        }
        if prev != 0 && prev + self.word(prev).load(r) == off {
            self.word(prev).fetch_add(new_size, r);
            self.word(prev + 8).store(new_next, r);
        } else {
            self.word(off).store(new_size, r);
            self.word(off + 8).store(new_next, r);
            self.word(link).store(off, r);
        }

        let head = self.word32(hdr::ALLOC_FREE_ROW).load(r);
        self.row_word32(row_idx, row::NEXT_FREE).store(head, r);
        self.word32(hdr::ALLOC_FREE_ROW).store(row_idx, r);

        self.word(hdr::ALLOC_BYTES_IN_USE).fetch_sub(size, r);
        self.word(hdr::ALLOC_LIVE).fetch_sub(1, r);
        self.word(hdr::FREE_COUNT).fetch_add(1, r);
        Ok(())
    }

    /// Snapshot of a region's metadata row. A row recycled for a newer
    /// region reports `NoSuchRegion` for the old id.
    pub fn lookup(&self, id: RegionId) -> Result<RegionMetadata, AllocError> {
        if !self.row_in_use(id) {
            return Err(AllocError::NoSuchRegion(id));
        }
        let row_idx = id.row();
        if self.row_word(row_idx, row::ID).load(Ordering::Acquire) != id.0 {
            return Err(AllocError::NoSuchRegion(id));
        }
        Ok(self.read_row(row_idx, id))
    }

    fn read_row(&self, row_idx: u32, id: RegionId) -> RegionMetadata {
        let r = Ordering::Relaxed;
        let w = self.row_word(row_idx, row::RC_WORD).load(Ordering::Acquire);
        let refcount = if (w >> 32) as u32 == id.tag() { w as u32 } else { 0 };
        RegionMetadata {
            region_id: id,
            offset: SegOffset(self.row_word(row_idx, row::OFFSET).load(r)),
            length: self.row_word(row_idx, row::LENGTH).load(r),
            refcount,
            owner_rank: self.row_word32(row_idx, row::OWNER).load(r),
            state: if refcount == 0 {
                RegionState::Free
            } else {
                RegionState::Live
            },
        }
    }

    /// Rows currently LIVE. Meaningful only at quiescence.
    pub fn live_regions(&self) -> Vec<RegionMetadata> {
        let rows = self.word32(hdr::ALLOC_ROWS_USED).load(Ordering::Acquire);
        (0..rows)
            .filter(|&r| self.row_word32(r, row::STATE).load(Ordering::Acquire) == STATE_LIVE)
            .map(|r| {
                let id = RegionId(self.row_word(r, row::ID).load(Ordering::Acquire));
                self.read_row(r, id)
            })
            .collect()
    }

    pub fn bytes_in_use(&self) -> u64 {
        self.word(hdr::ALLOC_BYTES_IN_USE).load(Ordering::Acquire)
    }

    pub fn allocations(&self) -> u64 {
        self.word(hdr::ALLOC_COUNT).load(Ordering::Acquire)
    }

    /// Counter snapshot plus a walk of the free list, taken under the lock.
    pub fn stats(&self, rank: u32) -> Result<AllocStats, AllocError> {
        let _guard = self.lock(rank)?;
        Ok(self.stats_unlocked())
    }

    fn stats_unlocked(&self) -> AllocStats {
        let r = Ordering::Relaxed;
        let (mut free_bytes, mut free_blocks) = (0, 0);
        let mut cur = self.word(hdr::ALLOC_FREE_HEAD).load(r);
        while cur != 0 {
            free_bytes += self.word(cur).load(r);
            free_blocks += 1;
            cur = self.word(cur + 8).load(r);
        }
        AllocStats {
            heap_size: self.seg.layout().heap_size,
            bytes_in_use: self.word(hdr::ALLOC_BYTES_IN_USE).load(r),
            high_water: self.word(hdr::ALLOC_HIGH_WATER).load(r),
            free_bytes,
            free_blocks,
            live_regions: self.word(hdr::ALLOC_LIVE).load(r),
            allocations: self.word(hdr::ALLOC_COUNT).load(r),
            frees: self.word(hdr::FREE_COUNT).load(r),
        }
    }

    /// Full structural check at quiescence: free blocks sorted, coalesced and
    /// inside the heap; live regions disjoint from each other and from free
    /// blocks; heap bytes conserved.
    pub fn check_consistency(&self, rank: u32) -> Result<AllocStats, String> {
        let _guard = self.lock(rank).map_err(|e| e.to_string())?;
        let l = self.seg.layout();
        let (lo, hi) = (l.heap_off, l.heap_off + l.heap_size);
        let r = Ordering::Relaxed;
        let mut extents = Vec::new();
        let mut cur = self.word(hdr::ALLOC_FREE_HEAD).load(r);
        let mut prev_end = 0;
        while cur != 0 {
            let size = self.word(cur).load(r);
            if cur < lo || cur + size > hi || size == 0 || size % BLOCK_ALIGN != 0 {
                return Err(format!("free block [{cur}, +{size}) outside heap or misaligned"));
            }
            if cur < prev_end {
                return Err(format!("free list unsorted or overlapping at {cur}"));
            }
            if cur == prev_end {
                return Err(format!("adjacent free blocks not coalesced at {cur}"));
            }
            prev_end = cur + size;
            extents.push((cur, size, false));
            cur = self.word(cur + 8).load(r);
        }
        let stats = self.stats_unlocked();
        let mut live_sum = 0;
        let mut padding = 0;
        let mut live = 0;
        let rows = self.word32(hdr::ALLOC_ROWS_USED).load(r);
        for row_idx in 0..rows {
            if self.row_word32(row_idx, row::STATE).load(r) != STATE_LIVE {
                continue;
            }
            let off = self.row_word(row_idx, row::OFFSET).load(r);
            let len = self.row_word(row_idx, row::LENGTH).load(r);
            let block = self.row_word(row_idx, row::BLOCK_LEN).load(r);
            if (self.row_word(row_idx, row::RC_WORD).load(r) as u32) == 0 {
                return Err(format!("row {row_idx} LIVE with refcount 0"));
            }
            live_sum += len;
            padding += block - len;
            live += 1;
            extents.push((off, block, true));
        }
        extents.sort_unstable();
        for pair in extents.windows(2) {
            if pair[0].0 + pair[0].1 > pair[1].0 {
                return Err(format!("extents overlap: {:?} and {:?}", pair[0], pair[1]));
            }
        }
        if live_sum != stats.bytes_in_use {
            return Err(format!(
                "bytes_in_use {} != sum of live lengths {live_sum}",
                stats.bytes_in_use
            ));
        }
        if live != stats.live_regions {
            return Err(format!("live counter {} != {live} live rows", stats.live_regions));
        }
        if l.heap_size != stats.bytes_in_use + stats.free_bytes + padding {
            return Err(format!(
                "heap {} != in use {} + free {} + padding {padding}",
                l.heap_size, stats.bytes_in_use, stats.free_bytes
            ));
        }
        Ok(stats)
    }
}
