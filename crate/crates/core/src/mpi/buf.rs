//! Buffers that live in the shared heap, and received payloads.

use std::fmt;
use std::sync::Arc;

use crate::segment::{SegOffset, SegmentMap};
use crate::shm_alloc::RegionId;

/// One reference to a shared-heap region.
///
/// Holding a `SharedBuf` holds one refcount on its region; dropping it
/// releases that reference. Sending it by reference moves the reference to
/// the receiver, so the sender can no longer touch the bytes.
pub struct SharedBuf {
    map: Arc<SegmentMap>,
    region: RegionId,
    off: SegOffset,
    len: usize,
    holder: u32,
}

impl SharedBuf {
    /// Wraps a reference the caller already owns.
    pub(crate) fn adopt(
        map: Arc<SegmentMap>,
        region: RegionId,
        off: SegOffset,
        len: usize,
        holder: u32,
    ) -> Self {
        SharedBuf {
            map,
            region,
            off,
            len,
            holder,
        }
    }

    pub(crate) fn empty(map: Arc<SegmentMap>, holder: u32) -> Self {
        SharedBuf::adopt(map, RegionId(0), SegOffset::NULL, 0, holder)
    }

    /// Gives up the reference without releasing it.
    pub(crate) fn into_raw(self) -> (RegionId, SegOffset, usize) {
        let raw = (self.region, self.off, self.len);
        std::mem::forget(self);
        raw
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn region_id(&self) -> RegionId {
        self.region
    }

    pub fn offset(&self) -> SegOffset {
        self.off
    }

    pub fn refcount(&self) -> u32 {
        if self.len == 0 {
            return 1;
        }
        self.map
            .allocator()
            .lookup(self.region)
            .map(|m| m.refcount)
            .unwrap_or(0)
    }

    pub fn as_slice(&self) -> &[u8] {
        if self.len == 0 {
            return &[];
        }
        let span = self.map.resolve(self.off, self.len as u64).expect("live region in bounds");
        // SAFETY: regions are written only through as_mut_slice, which requires
        // the sole reference
        unsafe { span.as_slice() }
    }

    /// Mutable view; only valid while this is the only reference.
    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        if self.len == 0 {
            return &mut [];
        }
        debug_assert_eq!(self.refcount(), 1, "writing a shared region with other holders");
        let span = self.map.resolve(self.off, self.len as u64).expect("live region in bounds");
        // SAFETY: exclusive by the refcount check and &mut self
        unsafe { span.as_mut_slice() }
    }
}

impl Drop for SharedBuf {
    fn drop(&mut self) {
        if self.len > 0 {
            let released = self.map.allocator().decref(self.region, self.holder);
            debug_assert!(released.is_ok(), "{released:?}");
        }
    }
}

impl fmt::Debug for SharedBuf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SharedBuf")
            .field("region", &self.region)
            .field("offset", &self.off)
            .field("len", &self.len)
            .finish()
    }
}

/// A received message body: local bytes, or a reference into the heap.
#[derive(Debug)]
pub enum Payload {
    Bytes(Vec<u8>),
    Shared(SharedBuf),
}

impl Payload {
    pub fn as_slice(&self) -> &[u8] {
        match self {
            Payload::Bytes(v) => v,
            Payload::Shared(b) => b.as_slice(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::Bytes(v) => v.len(),
            Payload::Shared(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, Payload::Shared(_))
    }

    /// Moves out local bytes, or copies a shared region (an application
    /// copy, not counted by the runtime).
    pub fn into_vec(self) -> Vec<u8> {
        match self {
            Payload::Bytes(v) => v,
            Payload::Shared(b) => b.as_slice().to_vec(),
        }
    }
}

impl AsRef<[u8]> for Payload {
    fn as_ref(&self) -> &[u8] {
        self.as_slice()
    }
}
