//! Message passing over a coherent shared memory segment.
//!
//! Every rank process maps one named shared-memory object (the [`segment`])
//! that stands in for a pooled memory expander. Inside it live a shared heap
//! with per-region metadata ([`shm_alloc`]), one multi-producer/single-consumer
//! descriptor queue per rank ([`msgqueue`]) and the segment-wide lock and
//! barrier ([`sync`]). The [`mpi`] module layers an MPI-like communicator on
//! top, with a by-reference backend and a two-copy baseline backend.
//!
//! All cross-process references are segment-relative offsets ([`SegOffset`]),
//! so a descriptor written by one process resolves to the same bytes in every
//! other process regardless of where each one mapped the segment.

#[cfg(target_endian = "big")]
compile_error!("the segment layout is little-endian only");

pub mod mpi;
pub mod msgqueue;
pub mod segment;
pub mod shm_alloc;
pub mod sync;

pub use mpi::{
    Backend, Communicator, JobConfig, Match, Message, MpiError, Payload, ReduceOp, Request,
    RunMetrics, SharedBuf, Status,
};
pub use segment::{
    attach_segment, create_segment, SegOffset, Segment, SegmentConfig, SegmentError, SegmentMap,
};
pub use shm_alloc::{AllocError, RegionId, RegionMetadata, RegionState};
