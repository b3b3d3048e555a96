//! The shared segment: creation, attachment and fixed layout.
//!
//! ```text
//! offset 0            SegmentHeader (HEADER_SIZE bytes)
//! queues_off          n_ranks × rank queue (header + capacity × ENTRY_SIZE)
//! coll_off            (n_ranks + 1) × 64-byte collective slots
//! ack_off             n_ranks × (n_ranks × capacity) delivery-ack words
//! table_off           region_rows × REGION_ROW_SIZE metadata rows
//! heap_off            shared heap, 4 KiB aligned, fills the remainder
//! ```
//!
//! Every area offset is a pure function of the [`SegmentConfig`]; see
//! `LAYOUT.md` at the repository root for the byte-level header format.

use std::ffi::CString;
use std::io;
use std::marker::PhantomData;
use std::ptr::{self, NonNull};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::msgqueue::{MessageQueue, ENTRY_SIZE, INLINE_CAPACITY};
use crate::shm_alloc::{self, ShmAllocator, REGION_ROW_SIZE};
use crate::sync::{Barrier, MetaLock};

/// `"CXLM"` read as a little-endian u32.
pub const MAGIC: u32 = 0x4358_4C4D;
pub const LAYOUT_VERSION: u32 = 1;
pub const HEADER_SIZE: u64 = 1024;
pub const MAX_RANKS: u32 = 64;
pub const MIN_HEAP: u64 = 1 << 20;
pub const HEAP_ALIGN: u64 = 4096;
pub const CACHE_LINE: u64 = 64;
pub const MAX_NAME_LEN: usize = 63;

pub const DEFAULT_TOTAL_SIZE: u64 = 256 << 20;
pub const DEFAULT_QUEUE_CAPACITY: u32 = 64;
pub const DEFAULT_EAGER_THRESHOLD: u32 = 256;
pub const DEFAULT_REGION_ROWS: u32 = 65_536;

const READY_TIMEOUT: Duration = Duration::from_secs(5);

/// Byte offsets of the header fields. All little-endian.
pub(crate) mod hdr {
    pub const MAGIC: u64 = 0;
    pub const LAYOUT_VERSION: u64 = 4;
    pub const TOTAL_SIZE: u64 = 8;
    pub const N_RANKS: u64 = 16;
    pub const QUEUE_CAPACITY: u64 = 20;
    pub const EAGER_THRESHOLD: u64 = 24;
    pub const REGION_ROWS: u64 = 28;
    pub const NAME: u64 = 32;
    pub const NAME_LEN: usize = 64;

    pub const READY: u64 = 128;
    pub const ATTACH_COUNT: u64 = 132;
    pub const ATTACHED_MASK: u64 = 136;

    pub const BARRIER_COUNT: u64 = 192;
    pub const BARRIER_SENSE: u64 = 196;
    pub const EPOCH: u64 = 200;

    pub const LOCK_STATE: u64 = 256;
    pub const LOCK_ACQUISITIONS: u64 = 264;

    pub const ALLOC_FREE_HEAD: u64 = 320;
    pub const ALLOC_BYTES_IN_USE: u64 = 328;
    pub const ALLOC_HIGH_WATER: u64 = 336;
    pub const ALLOC_NEXT_SEQ: u64 = 344;
    pub const ALLOC_FREE_ROW: u64 = 352;
    pub const ALLOC_ROWS_USED: u64 = 356;
    pub const ALLOC_LIVE: u64 = 360;
    pub const ALLOC_COUNT: u64 = 368;
    pub const FREE_COUNT: u64 = 376;

    pub const QUEUES_OFF: u64 = 384;
    pub const COLL_OFF: u64 = 392;
    pub const ACK_OFF: u64 = 400;
    pub const TABLE_OFF: u64 = 408;
    pub const HEAP_OFF: u64 = 416;
    pub const HEAP_SIZE: u64 = 424;
}

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("shared memory object '{0}' already exists")]
    NameInUse(String),
    #[error("segment of {given} bytes is below the minimum layout of {required} bytes")]
    SizeTooSmall { required: u64, given: u64 },
    #[error("invalid segment config: {0}")]
    InvalidConfig(String),
    #[error("no shared memory object named '{0}'")]
    NoSuchSegment(String),
    #[error("rank {rank} out of range for {n_ranks} ranks")]
    RankOutOfRange { rank: u32, n_ranks: u32 },
    #[error("rank {0} is already attached")]
    AlreadyAttached(u32),
    #[error("segment '{0}' did not become ready")]
    NotReady(String),
    #[error("segment '{0}' has a foreign header (magic {1:#010x}, version {2})")]
    BadHeader(String, u32, u32),
    #[error("span [{off}, {off}+{len}) exceeds segment size {total}")]
    OutOfBounds { off: u64, len: u64, total: u64 },
    #[error("null segment offset")]
    NullOffset,
    #[error("{op} failed: {source}")]
    Os {
        op: &'static str,
        #[source]
        source: io::Error,
    },
}

fn os_err(op: &'static str) -> SegmentError {
    SegmentError::Os {
        op,
        source: io::Error::last_os_error(),
    }
}

/// Byte offset from the segment base. Zero is the null offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SegOffset(pub u64);

impl SegOffset {
    pub const NULL: SegOffset = SegOffset(0);

    pub fn is_null(self) -> bool {
        self.0 == 0
    }

    pub fn get(self) -> u64 {
        self.0
    }

    pub fn add(self, bytes: u64) -> SegOffset {
        SegOffset(self.0 + bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentConfig {
    pub name: String,
    pub total_size: u64,
    pub n_ranks: u32,
    pub queue_capacity: u32,
    pub eager_threshold: u32,
    pub region_rows: u32,
}

impl SegmentConfig {
    pub fn new(name: impl Into<String>, n_ranks: u32) -> Self {
        SegmentConfig {
            name: name.into(),
            total_size: DEFAULT_TOTAL_SIZE,
            n_ranks,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            eager_threshold: DEFAULT_EAGER_THRESHOLD,
            region_rows: DEFAULT_REGION_ROWS,
        }
    }

    pub fn with_total_size(mut self, bytes: u64) -> Self {
        self.total_size = bytes;
        self
    }

    pub fn with_queue_capacity(mut self, entries: u32) -> Self {
        self.queue_capacity = entries;
        self
    }

    pub fn with_eager_threshold(mut self, bytes: u32) -> Self {
        self.eager_threshold = bytes;
        self
    }

    pub fn with_region_rows(mut self, rows: u32) -> Self {
        self.region_rows = rows;
        self
    }

    /// Checks the config invariants and returns the resulting layout.
    pub fn validate(&self) -> Result<Layout, SegmentError> {
        let bad = |msg: String| Err(SegmentError::InvalidConfig(msg));
        if self.name.is_empty() || self.name.len() > MAX_NAME_LEN || self.name.contains('/') {
            return bad(format!("name '{}' must be 1..={MAX_NAME_LEN} bytes without '/'", self.name));
        }
        if self.n_ranks == 0 || self.n_ranks > MAX_RANKS {
            return bad(format!("n_ranks {} not in 1..={MAX_RANKS}", self.n_ranks));
        }
        if !self.queue_capacity.is_power_of_two() {
            return bad(format!("queue_capacity {} is not a power of two", self.queue_capacity));
        }
        if self.eager_threshold as usize > INLINE_CAPACITY {
            return bad(format!(
                "eager_threshold {} exceeds inline capacity {INLINE_CAPACITY}",
                self.eager_threshold
            ));
        }
        if self.region_rows == 0 {
            return bad("region_rows must be positive".into());
        }
        let layout = Layout::compute(self);
        let required = layout.heap_off + MIN_HEAP;
        if self.total_size < required {
            return Err(SegmentError::SizeTooSmall {
                required,
                given: self.total_size,
            });
        }
        Ok(layout)
    }
}

/// Area offsets inside the segment; a pure function of the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_ranks: u32,
    pub queue_capacity: u32,
    pub queue_header: u64,
    pub queue_footprint: u64,
    pub queues_off: u64,
    pub coll_off: u64,
    pub ack_off: u64,
    pub ack_slots_per_rank: u64,
    pub table_off: u64,
    pub region_rows: u32,
    pub heap_off: u64,
    pub heap_size: u64,
    pub total_size: u64,
}

pub(crate) const fn round_up(v: u64, to: u64) -> u64 {
    v.div_ceil(to) * to
}

impl Layout {
    pub fn compute(cfg: &SegmentConfig) -> Layout {
        let n = cfg.n_ranks as u64;
        let cap = cfg.queue_capacity as u64;
        // head and tail on their own cache lines, then the per-source sequence counters
        let queue_header = 2 * CACHE_LINE + round_up(n * 8, CACHE_LINE);
        let queue_footprint = queue_header + cap * ENTRY_SIZE;
        let queues_off = HEADER_SIZE;
        let coll_off = queues_off + n * queue_footprint;
        let ack_off = coll_off + (n + 1) * CACHE_LINE;
        let ack_slots_per_rank = n * cap;
        let table_off = round_up(ack_off + n * ack_slots_per_rank * 8, CACHE_LINE);
        let table_end = table_off + cfg.region_rows as u64 * REGION_ROW_SIZE;
        let heap_off = round_up(table_end, HEAP_ALIGN);
        let heap_size = cfg.total_size.saturating_sub(heap_off) / CACHE_LINE * CACHE_LINE;
        Layout {
            n_ranks: cfg.n_ranks,
            queue_capacity: cfg.queue_capacity,
            queue_header,
            queue_footprint,
            queues_off,
            coll_off,
            ack_off,
            ack_slots_per_rank,
            table_off,
            region_rows: cfg.region_rows,
            heap_off,
            heap_size,
            total_size: cfg.total_size,
        }
    }

    pub fn queue_offset(&self, rank: u32) -> u64 {
        assert!(rank < self.n_ranks, "queue index {rank} out of range");
        self.queues_off + rank as u64 * self.queue_footprint
    }

    pub fn coll_slot(&self, slot: u32) -> u64 {
        assert!(slot <= self.n_ranks);
        self.coll_off + slot as u64 * CACHE_LINE
    }

    pub fn ack_word(&self, sender: u32, slot: u64) -> u64 {
        debug_assert!(sender < self.n_ranks && slot < self.ack_slots_per_rank);
        self.ack_off + (sender as u64 * self.ack_slots_per_rank + slot) * 8
    }

    pub fn region_row(&self, row: u32) -> u64 {
        debug_assert!(row < self.region_rows);
        self.table_off + row as u64 * REGION_ROW_SIZE
    }
}

struct Mapping {
    ptr: NonNull<u8>,
    len: usize,
}

// SAFETY: the mapping is plain shared memory; all concurrent mutation goes
// through atomics or is serialized by the protocols layered on top.
unsafe impl Send for Mapping {}
unsafe impl Sync for Mapping {}

impl Drop for Mapping {
    fn drop(&mut self) {
        unsafe {
            libc::munmap(self.ptr.as_ptr().cast(), self.len);
        }
    }
}

/// One process-local mapping of the shared segment.
///
/// Cheap to share through an `Arc`; [`crate::SharedBuf`] keeps one so that
/// a received region stays readable for as long as the buffer lives.
pub struct SegmentMap {
    map: Mapping,
    name: String,
    config: SegmentConfig,
    layout: Layout,
}

impl std::fmt::Debug for SegmentMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegmentMap")
            .field("name", &self.name)
            .field("base", &self.map.ptr)
            .field("len", &self.map.len)
            .finish()
    }
}

impl SegmentMap {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> &SegmentConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn total_size(&self) -> u64 {
        self.map.len as u64
    }

    /// Address of the local mapping; differs between processes.
    pub fn base_addr(&self) -> usize {
        self.map.ptr.as_ptr() as usize
    }

    /// Resolves a segment-relative span against this process's mapping.
    pub fn resolve(&self, off: SegOffset, len: u64) -> Result<SegSpan<'_>, SegmentError> {
        if off.is_null() {
            return Err(SegmentError::NullOffset);
        }
        let total = self.total_size();
        if off.0.checked_add(len).is_none_or(|end| end > total) {
            return Err(SegmentError::OutOfBounds {
                off: off.0,
                len,
                total,
            });
        }
        Ok(SegSpan {
            ptr: self.ptr_at(off.0),
            len: len as usize,
            off,
            _seg: PhantomData,
        })
    }

    pub(crate) fn ptr_at(&self, off: u64) -> *mut u8 {
        debug_assert!(off <= self.map.len as u64);
        unsafe { self.map.ptr.as_ptr().add(off as usize) }
    }

    pub(crate) fn u32_at(&self, off: u64) -> &AtomicU32 {
        debug_assert!(off % 4 == 0 && off + 4 <= self.map.len as u64);
        unsafe { &*(self.ptr_at(off) as *const AtomicU32) }
    }

    pub(crate) fn u64_at(&self, off: u64) -> &AtomicU64 {
        debug_assert!(off % 8 == 0 && off + 8 <= self.map.len as u64);
        unsafe { &*(self.ptr_at(off) as *const AtomicU64) }
    }

    pub fn attach_count(&self) -> u32 {
        self.u32_at(hdr::ATTACH_COUNT).load(Ordering::Acquire)
    }

    pub fn attached_mask(&self) -> u64 {
        self.u64_at(hdr::ATTACHED_MASK).load(Ordering::Acquire)
    }

    pub fn is_ready(&self) -> bool {
        self.u32_at(hdr::READY).load(Ordering::Acquire) == 1
    }

    pub fn magic(&self) -> u32 {
        self.u32_at(hdr::MAGIC).load(Ordering::Relaxed)
    }

    pub fn meta_lock(&self) -> MetaLock<'_> {
        MetaLock::from_atomics(
            self.u32_at(hdr::LOCK_STATE),
            self.u64_at(hdr::LOCK_ACQUISITIONS),
        )
    }

    pub fn barrier(&self) -> Barrier<'_> {
        Barrier::from_atomics(
            self.u32_at(hdr::BARRIER_COUNT),
            self.u32_at(hdr::BARRIER_SENSE),
            self.u64_at(hdr::EPOCH),
            self.config.n_ranks,
        )
    }

    pub fn allocator(&self) -> ShmAllocator<'_> {
        ShmAllocator::new(self)
    }

    pub fn queue(&self, owner: u32) -> MessageQueue<'_> {
        MessageQueue::new(self, owner)
    }
}

/// A resolved span of segment memory. No copy is made; the span aliases the
/// shared bytes, so the safe accessors copy in and out explicitly.
#[derive(Debug, Clone, Copy)]
pub struct SegSpan<'a> {
    ptr: *mut u8,
    len: usize,
    off: SegOffset,
    _seg: PhantomData<&'a SegmentMap>,
}

impl<'a> SegSpan<'a> {
    pub fn offset(&self) -> SegOffset {
        self.off
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_ptr(&self) -> *mut u8 {
        self.ptr
    }

    /// # Safety
    /// No other process or thread may write the span while the slice lives.
    pub unsafe fn as_slice(&self) -> &'a [u8] {
        std::slice::from_raw_parts(self.ptr, self.len)
    }

    /// # Safety
    /// The caller must have exclusive access to the span while the slice lives.
    #[allow(clippy::mut_from_ref)]
    pub unsafe fn as_mut_slice(&self) -> &'a mut [u8] {
        std::slice::from_raw_parts_mut(self.ptr, self.len)
    }

    pub fn read_u8(&self, at: usize) -> u8 {
        assert!(at < self.len);
        unsafe { ptr::read_volatile(self.ptr.add(at)) }
    }

    pub fn write_u8(&self, at: usize, v: u8) {
        assert!(at < self.len);
        unsafe { ptr::write_volatile(self.ptr.add(at), v) }
    }

    pub fn copy_to(&self, dst: &mut [u8]) {
        assert!(dst.len() <= self.len);
        unsafe { ptr::copy_nonoverlapping(self.ptr, dst.as_mut_ptr(), dst.len()) }
    }

    pub fn copy_from(&self, src: &[u8]) {
        assert!(src.len() <= self.len);
        unsafe { ptr::copy_nonoverlapping(src.as_ptr(), self.ptr, src.len()) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttachOptions {
    /// Pre-populate page tables instead of faulting pages in on first touch.
    pub prefault: bool,
    pub ready_timeout: Duration,
}

impl Default for AttachOptions {
    fn default() -> Self {
        AttachOptions {
            prefault: false,
            ready_timeout: READY_TIMEOUT,
        }
    }
}

/// Creator handle or rank view of the shared segment.
///
/// The creator unlinks the OS object when dropped; a rank view clears its
/// attachment bit when dropped. The mapping itself lives until the last
/// [`SegmentMap`] reference goes away.
#[derive(Debug)]
pub struct Segment {
    map: Arc<SegmentMap>,
    rank: Option<u32>,
    unlink_on_drop: bool,
}

impl std::ops::Deref for Segment {
    type Target = SegmentMap;

    fn deref(&self) -> &SegmentMap {
        &self.map
    }
}

impl Segment {
    pub fn map(&self) -> &Arc<SegmentMap> {
        &self.map
    }

    pub fn rank(&self) -> Option<u32> {
        self.rank
    }

    /// Keeps the OS object alive after this handle drops.
    pub fn keep_on_drop(&mut self) {
        self.unlink_on_drop = false;
    }
}

impl Drop for Segment {
    fn drop(&mut self) {
        if let Some(rank) = self.rank {
            let bit = 1u64 << rank;
            self.map
                .u64_at(hdr::ATTACHED_MASK)
                .fetch_and(!bit, Ordering::AcqRel);
            self.map
                .u32_at(hdr::ATTACH_COUNT)
                .fetch_sub(1, Ordering::AcqRel);
        }
        if self.unlink_on_drop {
            let _ = unlink_segment(&self.map.name);
        }
    }
}

/// Shared-memory object name for a job id.
pub fn job_segment_name(job_id: &str) -> String {
    format!("shmpi.{job_id}")
}

fn shm_path(name: &str) -> CString {
    CString::new(format!("/{name}")).expect("segment names never contain NUL")
}

fn map_fd(fd: libc::c_int, len: usize, prefault: bool) -> Result<Mapping, SegmentError> {
    #[allow(unused_mut)]
    let mut flags = libc::MAP_SHARED;
    #[cfg(target_os = "linux")]
    if prefault {
        flags |= libc::MAP_POPULATE;
    }
    let ptr = unsafe {
        libc::mmap(
            ptr::null_mut(),
            len,
            libc::PROT_READ | libc::PROT_WRITE,
            flags,
            fd,
            0,
        )
    };
    if ptr == libc::MAP_FAILED {
        return Err(os_err("mmap"));
    }
    let mapping = Mapping {
        ptr: NonNull::new(ptr.cast()).expect("mmap returned null"),
        len,
    };
    #[cfg(not(target_os = "linux"))]
    if prefault {
        for off in (0..len).step_by(4096) {
            unsafe { ptr::read_volatile(mapping.ptr.as_ptr().add(off)) };
        }
    }
    Ok(mapping)
}

pub fn create_segment(config: SegmentConfig) -> Result<Segment, SegmentError> {
    create_segment_with(config, AttachOptions::default())
}

/// Creates and formats the segment. The ready flag is published last, so an
/// attacher that sees it set also sees the complete header, queues and heap.
pub fn create_segment_with(
    config: SegmentConfig,
    opts: AttachOptions,
) -> Result<Segment, SegmentError> {
    let layout = config.validate()?;
    let path = shm_path(&config.name);
    let fd = unsafe {
        libc::shm_open(
            path.as_ptr(),
            libc::O_CREAT | libc::O_EXCL | libc::O_RDWR,
            0o600 as libc::mode_t,
        )
    };
    if fd < 0 {
        let err = io::Error::last_os_error();
        return Err(if err.raw_os_error() == Some(libc::EEXIST) {
            SegmentError::NameInUse(config.name.clone())
        } else {
            SegmentError::Os {
                op: "shm_open",
                source: err,
            }
        });
    }
    let mapped = (|| {
        if unsafe { libc::ftruncate(fd, config.total_size as libc::off_t) } != 0 {
            return Err(os_err("ftruncate"));
        }
        map_fd(fd, config.total_size as usize, opts.prefault)
    })();
    unsafe { libc::close(fd) };
    let map = match mapped {
        Ok(map) => map,
        Err(e) => {
            let _ = unlink_segment(&config.name);
            return Err(e);
        }
    };

    let seg = SegmentMap {
        map,
        name: config.name.clone(),
        config,
        layout,
    };
    format_header(&seg);
    shm_alloc::format_heap(&seg);
    seg.u32_at(hdr::READY).store(1, Ordering::Release);
    Ok(Segment {
        map: Arc::new(seg),
        rank: None,
        unlink_on_drop: true,
    })
}

fn format_header(seg: &SegmentMap) {
    let cfg = &seg.config;
    let l = &seg.layout;
    let r = Ordering::Relaxed;
    seg.u32_at(hdr::MAGIC).store(MAGIC, r);
    seg.u32_at(hdr::LAYOUT_VERSION).store(LAYOUT_VERSION, r);
    seg.u64_at(hdr::TOTAL_SIZE).store(cfg.total_size, r);
    seg.u32_at(hdr::N_RANKS).store(cfg.n_ranks, r);
    seg.u32_at(hdr::QUEUE_CAPACITY).store(cfg.queue_capacity, r);
    seg.u32_at(hdr::EAGER_THRESHOLD).store(cfg.eager_threshold, r);
    seg.u32_at(hdr::REGION_ROWS).store(cfg.region_rows, r);
    let mut name = [0u8; hdr::NAME_LEN];
    name[..cfg.name.len()].copy_from_slice(cfg.name.as_bytes());
    unsafe {
        ptr::copy_nonoverlapping(name.as_ptr(), seg.ptr_at(hdr::NAME), name.len());
    }
    seg.u64_at(hdr::QUEUES_OFF).store(l.queues_off, r);
    seg.u64_at(hdr::COLL_OFF).store(l.coll_off, r);
    seg.u64_at(hdr::ACK_OFF).store(l.ack_off, r);
    seg.u64_at(hdr::TABLE_OFF).store(l.table_off, r);
    seg.u64_at(hdr::HEAP_OFF).store(l.heap_off, r);
    seg.u64_at(hdr::HEAP_SIZE).store(l.heap_size, r);
}

fn read_config(seg: &Mapping, name: &str) -> Result<SegmentConfig, SegmentError> {
    let word32 = |off: u64| unsafe { ptr::read(seg.ptr.as_ptr().add(off as usize) as *const u32) };
    let word64 = |off: u64| unsafe { ptr::read(seg.ptr.as_ptr().add(off as usize) as *const u64) };
    let magic = u32::from_le(word32(hdr::MAGIC));
    let version = u32::from_le(word32(hdr::LAYOUT_VERSION));
    if magic != MAGIC || version != LAYOUT_VERSION {
        return Err(SegmentError::BadHeader(name.to_string(), magic, version));
    }
    Ok(SegmentConfig {
        name: name.to_string(),
        total_size: u64::from_le(word64(hdr::TOTAL_SIZE)),
        n_ranks: u32::from_le(word32(hdr::N_RANKS)),
        queue_capacity: u32::from_le(word32(hdr::QUEUE_CAPACITY)),
        eager_threshold: u32::from_le(word32(hdr::EAGER_THRESHOLD)),
        region_rows: u32::from_le(word32(hdr::REGION_ROWS)),
    })
}

pub fn attach_segment(name: &str, rank: u32) -> Result<Segment, SegmentError> {
    attach_segment_with(name, rank, AttachOptions::default())
}

/// Maps an existing segment as `rank`.
pub fn attach_segment_with(
    name: &str,
    rank: u32,
    opts: AttachOptions,
) -> Result<Segment, SegmentError> {
    let path = shm_path(name);
    let fd = unsafe { libc::shm_open(path.as_ptr(), libc::O_RDWR, 0) };
    if fd < 0 {
        let err = io::Error::last_os_error();
        return Err(if err.raw_os_error() == Some(libc::ENOENT) {
            SegmentError::NoSuchSegment(name.to_string())
        } else {
            SegmentError::Os {
                op: "shm_open",
                source: err,
            }
        });
    }
    let deadline = Instant::now() + opts.ready_timeout;
    let mapped = (|| {
        // the creator may not have sized the object yet
        let size = loop {
            let mut st: libc::stat = unsafe { std::mem::zeroed() };
            if unsafe { libc::fstat(fd, &mut st) } != 0 {
                return Err(os_err("fstat"));
            }
            if st.st_size as u64 >= HEADER_SIZE {
                break st.st_size as usize;
            }
            if Instant::now() >= deadline {
                return Err(SegmentError::NotReady(name.to_string()));
            }
            std::thread::sleep(Duration::from_millis(1));
        };
        map_fd(fd, size, opts.prefault)
    })();
    unsafe { libc::close(fd) };
    let map = mapped?;

    let ready = unsafe { &*(map.ptr.as_ptr().add(hdr::READY as usize) as *const AtomicU32) };
    while ready.load(Ordering::Acquire) != 1 {
        if Instant::now() >= deadline {
            return Err(SegmentError::NotReady(name.to_string()));
        }
        std::thread::sleep(Duration::from_micros(200));
    }
    let config = read_config(&map, name)?;
    if config.total_size != map.len as u64 {
        return Err(SegmentError::BadHeader(name.to_string(), MAGIC, LAYOUT_VERSION));
    }
    if rank >= config.n_ranks {
        return Err(SegmentError::RankOutOfRange {
            rank,
            n_ranks: config.n_ranks,
        });
    }
    let layout = Layout::compute(&config);
    let seg = SegmentMap {
        map,
        name: name.to_string(),
        config,
        layout,
    };
    let bit = 1u64 << rank;
    let prev = seg.u64_at(hdr::ATTACHED_MASK).fetch_or(bit, Ordering::AcqRel);
    if prev & bit != 0 {
        return Err(SegmentError::AlreadyAttached(rank));
    }
    seg.u32_at(hdr::ATTACH_COUNT).fetch_add(1, Ordering::AcqRel);
    Ok(Segment {
        map: Arc::new(seg),
        rank: Some(rank),
        unlink_on_drop: false,
    })
}

/// Removes the OS object. Existing mappings stay valid. Returns whether the
/// object existed.
pub fn unlink_segment(name: &str) -> Result<bool, SegmentError> {
    let path = shm_path(name);
    if unsafe { libc::shm_unlink(path.as_ptr()) } == 0 {
        return Ok(true);
    }
    let err = io::Error::last_os_error();
    if err.raw_os_error() == Some(libc::ENOENT) {
        Ok(false)
    } else {
        Err(SegmentError::Os {
            op: "shm_unlink",
            source: err,
        })
    }
}

pub fn segment_exists(name: &str) -> bool {
    let path = shm_path(name);
    let fd = unsafe { libc::shm_open(path.as_ptr(), libc::O_RDONLY, 0) };
    if fd >= 0 {
        unsafe { libc::close(fd) };
        true
    } else {
        false
    }
}

/// Names of `shmpi.*` objects currently present (Linux exposes them under
/// `/dev/shm`; elsewhere this returns an empty list).
pub fn list_job_segments() -> Vec<String> {
    let Ok(dir) = std::fs::read_dir("/dev/shm") else {
        return Vec::new();
    };
    let mut names: Vec<String> = dir
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with("shmpi."))
        .collect();
    names.sort();
    names
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    static NEXT: AtomicUsize = AtomicUsize::new(0);

    fn unique(tag: &str) -> String {
        format!(
            "shmpi.ut-{tag}-{}-{}",
            std::process::id(),
            NEXT.fetch_add(1, Ordering::Relaxed)
        )
    }

    fn small(name: &str, n_ranks: u32) -> SegmentConfig {
        SegmentConfig::new(name, n_ranks)
            .with_total_size(8 << 20)
            .with_region_rows(1024)
    }

    #[test]
    fn create_formats_header() {
        let name = unique("t0");
        let cfg = SegmentConfig::new(&name, 4)
            .with_total_size(64 << 20)
            .with_queue_capacity(64)
            .with_eager_threshold(256);
        let seg = create_segment(cfg.clone()).unwrap();
        assert!(seg.is_ready());
        assert_eq!(seg.magic(), MAGIC);
        assert_eq!(seg.config(), &cfg);
        assert_eq!(seg.attach_count(), 0);
        for r in 0..4 {
            let q = seg.queue(r);
            assert_eq!(q.head(), 0);
            assert_eq!(q.tail(), 0);
        }
    }

    #[test]
    fn size_too_small() {
        let cfg = SegmentConfig::new(unique("tiny"), 4).with_total_size(4096);
        assert!(matches!(
            create_segment(cfg),
            Err(SegmentError::SizeTooSmall { .. })
        ));
    }

    #[test]
    fn config_invariants() {
        let base = small("x", 2);
        assert!(base.clone().with_queue_capacity(48).validate().is_err());
        assert!(base.clone().with_eager_threshold(257).validate().is_err());
        assert!(SegmentConfig::new("x", 0).validate().is_err());
        assert!(SegmentConfig::new("x", MAX_RANKS + 1).validate().is_err());
        assert!(SegmentConfig::new("a/b", 1).validate().is_err());
        let layout = base.validate().unwrap();
        assert!(layout.heap_size >= MIN_HEAP);
        assert_eq!(layout.heap_off % HEAP_ALIGN, 0);
    }

    #[test]
    fn name_in_use() {
        let name = unique("dup");
        let _a = create_segment(small(&name, 1)).unwrap();
        assert!(matches!(
            create_segment(small(&name, 1)),
            Err(SegmentError::NameInUse(_))
        ));
    }

    #[test]
    fn attach_errors() {
        let name = unique("att");
        let _owner = create_segment(small(&name, 4)).unwrap();
        assert!(matches!(
            attach_segment(&name, 7),
            Err(SegmentError::RankOutOfRange { rank: 7, n_ranks: 4 })
        ));
        assert!(matches!(
            attach_segment(&unique("gone"), 0),
            Err(SegmentError::NoSuchSegment(_))
        ));
        let a = attach_segment(&name, 1).unwrap();
        assert!(matches!(
            attach_segment(&name, 1),
            Err(SegmentError::AlreadyAttached(1))
        ));
        assert_eq!(a.attach_count(), 1);
        drop(a);
        let b = attach_segment(&name, 1).unwrap();
        assert_eq!(b.attach_count(), 1);
    }

    #[test]
    fn mappings_share_bytes() {
        let name = unique("share");
        let _owner = create_segment(small(&name, 2)).unwrap();
        let r0 = attach_segment(&name, 0).unwrap();
        let r1 = attach_segment(&name, 1).unwrap();
        assert_ne!(r0.base_addr(), r1.base_addr());
        let off = SegOffset(4096);
        r0.resolve(off, 1).unwrap().write_u8(0, 0xAB);
        assert_eq!(r1.resolve(off, 1).unwrap().read_u8(0), 0xAB);
        assert_eq!(r0.attach_count(), 2);
    }

    #[test]
    fn reattach_preserves_contents() {
        let name = unique("re");
        let _owner = create_segment(small(&name, 1)).unwrap();
        let heap = Layout::compute(&small(&name, 1)).heap_off;
        {
            let r = attach_segment(&name, 0).unwrap();
            r.resolve(SegOffset(heap + 100), 4)
                .unwrap()
                .copy_from(&[1, 2, 3, 4]);
        }
        let r = attach_segment(&name, 0).unwrap();
        let mut out = [0u8; 4];
        r.resolve(SegOffset(heap + 100), 4).unwrap().copy_to(&mut out);
        assert_eq!(out, [1, 2, 3, 4]);
    }

    #[test]
    fn resolve_bounds() {
        let name = unique("res");
        let seg = create_segment(small(&name, 1)).unwrap();
        let total = seg.total_size();
        let span = seg.resolve(SegOffset(HEADER_SIZE), 8).unwrap();
        assert_eq!(span.offset().get(), seg.layout().queue_offset(0));
        assert!(matches!(
            seg.resolve(SegOffset(total - 4), 8),
            Err(SegmentError::OutOfBounds { .. })
        ));
        assert!(matches!(
            seg.resolve(SegOffset(0), 1),
            Err(SegmentError::NullOffset)
        ));
        assert!(seg.resolve(SegOffset(total - 8), 8).is_ok());
    }

    #[test]
    fn layout_is_pure() {
        let cfg = SegmentConfig::new("layout", 8);
        let a = Layout::compute(&cfg);
        let b = Layout::compute(&cfg.clone());
        assert_eq!(a, b);
        for i in 0..8 {
            assert_eq!(a.queue_offset(i), b.queue_offset(i));
            assert_eq!(a.queue_offset(i) % CACHE_LINE, 0);
            if i > 0 {
                assert_eq!(a.queue_offset(i) - a.queue_offset(i - 1), a.queue_footprint);
            }
        }
        assert_eq!(a.queue_offset(0), HEADER_SIZE);
        assert!(a.coll_off >= a.queue_offset(7) + a.queue_footprint);
        assert!(a.table_off >= a.ack_word(7, a.ack_slots_per_rank - 1) + 8);
        assert!(a.heap_off >= a.region_row(cfg.region_rows - 1) + REGION_ROW_SIZE);
    }

    #[test]
    fn creator_unlinks_on_drop() {
        let name = unique("unl");
        let seg = create_segment(small(&name, 1)).unwrap();
        assert!(segment_exists(&name));
        drop(seg);
        assert!(!segment_exists(&name));
    }
}
