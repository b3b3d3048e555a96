//! Boundary-row exchange between vertically adjacent row blocks.

use std::borrow::Cow;

use shmpi_core::{Communicator, Match, MpiError, Payload};

const TAG_UP: i32 = 1;
const TAG_DOWN: i32 = 2;

/// Neighbors of a row block. `None` marks a physical boundary.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Neighbors {
    pub above: Option<u32>,
    pub below: Option<u32>,
}

impl Neighbors {
    pub fn open(rank: u32, size: u32) -> Self {
        Neighbors {
            above: rank.checked_sub(1),
            below: (rank + 1 < size).then_some(rank + 1),
        }
    }

    pub fn ring(rank: u32, size: u32) -> Self {
        Neighbors {
            above: Some((rank + size - 1) % size),
            below: Some((rank + 1) % size),
        }
    }
}

/// Sends `first` up and `last` down and returns what arrived from above and
/// below. Rows travel as plain sends and are received by reference, so the
/// only runtime copy on the pointer backend is the sender's staging copy.
/// A missing neighbor, or a ring of one, yields `None`.
pub(crate) fn exchange(
    comm: &mut Communicator,
    nb: Neighbors,
    first: &[f64],
    last: &[f64],
) -> Result<[Option<Payload>; 2], MpiError> {
    let me = comm.rank();
    let above = nb.above.filter(|&r| r != me);
    let below = nb.below.filter(|&r| r != me);
    if let Some(up) = above {
        comm.send(up, TAG_UP, bytemuck::cast_slice(first))?;
    }
    if let Some(down) = below {
        comm.send(down, TAG_DOWN, bytemuck::cast_slice(last))?;
    }
    let top = match above {
        Some(up) => Some(comm.recv_shared(Match::exact(up, TAG_DOWN))?.payload),
        None => None,
    };
    let bottom = match below {
        Some(down) => Some(comm.recv_shared(Match::exact(down, TAG_UP))?.payload),
        None => None,
    };
    Ok([top, bottom])
}

/// Views a received halo as `len` values, or `fallback` when nothing
/// arrived. Shared regions are 64-byte aligned, so this only copies when a
/// private buffer happens to be misaligned.
pub(crate) fn row<'a>(
    halo: Option<&'a Payload>,
    fallback: &'a [f64],
) -> Result<Cow<'a, [f64]>, MpiError> {
    let Some(p) = halo else {
        return Ok(Cow::Borrowed(fallback));
    };
    let bytes = p.as_slice();
    if bytes.len() != std::mem::size_of_val(fallback) {
        return Err(MpiError::MismatchedCounts(format!(
            "halo row of {} bytes, expected {}",
            bytes.len(),
            std::mem::size_of_val(fallback)
        )));
    }
    Ok(match bytemuck::try_cast_slice(bytes) {
        Ok(v) => Cow::Borrowed(v),
        Err(_) => Cow::Owned(bytemuck::pod_collect_to_vec(bytes)),
    })
}
