//! Segment-wide synchronization: the metadata spinlock, a sense-reversing
//! barrier and the adaptive polling policy every waiting loop goes through.
//!
//! The primitives are views over atomics that live in the shared segment, so
//! they work the same between threads of one process and between processes.
//! Waiting spins for `spin_limit` checks, then sleeps with exponential
//! backoff capped at `backoff_max`; observed progress resets the backoff.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use thiserror::Error;

pub const ENV_SPIN_LIMIT: &str = "SHMPI_SPIN_LIMIT";
pub const ENV_BARRIER_TIMEOUT_MS: &str = "SHMPI_BARRIER_TIMEOUT_MS";
pub const DEFAULT_BARRIER_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SyncError {
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("rank {caller} cannot unlock a lock owned by {owner:?}")]
    NotOwner { owner: Option<u32>, caller: u32 },
    #[error("invalid polling policy: {0}")]
    InvalidPolicy(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PollingPolicy {
    pub spin_limit: u32,
    pub backoff_initial: Duration,
    pub backoff_max: Duration,
    pub multiplier: u32,
}

impl Default for PollingPolicy {
    fn default() -> Self {
        PollingPolicy {
            spin_limit: 1_000,
            backoff_initial: Duration::from_micros(1),
            backoff_max: Duration::from_millis(1),
            multiplier: 2,
        }
    }
}

impl PollingPolicy {
    /// Defaults, with `SHMPI_SPIN_LIMIT` applied when set.
    pub fn from_env() -> Self {
        let mut policy = PollingPolicy::default();
        if let Some(limit) = std::env::var(ENV_SPIN_LIMIT)
            .ok()
            .and_then(|v| v.parse().ok())
        {
            policy.spin_limit = limit;
        }
        policy
    }

    pub fn validate(&self) -> Result<(), SyncError> {
        if self.backoff_initial > self.backoff_max {
            return Err(SyncError::InvalidPolicy("backoff_initial > backoff_max"));
        }
        if self.multiplier < 2 {
            return Err(SyncError::InvalidPolicy("multiplier must exceed 1"));
        }
        Ok(())
    }
}

pub fn barrier_timeout_from_env() -> Duration {
    std::env::var(ENV_BARRIER_TIMEOUT_MS)
        .ok()
        .and_then(|v| v.parse().ok())
        .map(Duration::from_millis)
        .unwrap_or(DEFAULT_BARRIER_TIMEOUT)
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct PollStats {
    /// Failed readiness checks before the predicate held.
    pub iterations: u64,
    pub sleeps: u64,
    pub slept: Duration,
    pub resets: u64,
}

/// State of one waiting loop under a [`PollingPolicy`].
#[derive(Debug)]
pub struct Backoff<'p> {
    policy: &'p PollingPolicy,
    deadline: Option<Instant>,
    started: Instant,
    spins: u32,
    next_sleep: Duration,
    last_progress: Option<u64>,
    stats: PollStats,
    schedule: Option<Vec<Duration>>,
}

impl<'p> Backoff<'p> {
    pub fn new(policy: &'p PollingPolicy) -> Self {
        Backoff {
            policy,
            deadline: None,
            started: Instant::now(),
            spins: 0,
            next_sleep: policy.backoff_initial,
            last_progress: None,
            stats: PollStats::default(),
            schedule: None,
        }
    }

    pub fn with_deadline(mut self, deadline: Option<Instant>) -> Self {
        self.deadline = deadline;
        self
    }

    /// Keep every requested sleep duration for inspection.
    pub fn recording(mut self) -> Self {
        self.schedule = Some(Vec::new());
        self
    }

    /// Reports a traffic counter; any change since the last report counts as
    /// progress and drops the loop back to the spin phase.
    pub fn observe(&mut self, marker: u64) {
        match self.last_progress {
            Some(prev) if prev != marker => self.reset(),
            _ => {}
        }
        self.last_progress = Some(marker);
    }

    pub fn reset(&mut self) {
        self.spins = 0;
        self.next_sleep = self.policy.backoff_initial;
        self.stats.resets += 1;
    }

    /// Waits one step after a failed check.
    pub fn snooze(&mut self) -> Result<(), SyncError> {
        self.stats.iterations += 1;
        if let Some(deadline) = self.deadline {
            if Instant::now() >= deadline {
                return Err(SyncError::Timeout(self.started.elapsed()));
            }
        }
        if self.spins < self.policy.spin_limit {
            self.spins += 1;
            std::hint::spin_loop();
            return Ok(());
        }
        let d = self.next_sleep;
        if let Some(schedule) = self.schedule.as_mut() {
            schedule.push(d);
        }
        let t = Instant::now();
        std::thread::sleep(d);
        self.stats.sleeps += 1;
        self.stats.slept += t.elapsed();
        self.next_sleep = (d * self.policy.multiplier).min(self.policy.backoff_max);
        Ok(())
    }

    pub fn stats(&self) -> PollStats {
        self.stats
    }

    pub fn schedule(&self) -> &[Duration] {
        self.schedule.as_deref().unwrap_or(&[])
    }
}

/// Polls `ready` until it returns true.
pub fn poll_wait(
    policy: &PollingPolicy,
    deadline: Option<Instant>,
    mut ready: impl FnMut() -> bool,
) -> Result<PollStats, SyncError> {
    let mut backoff = Backoff::new(policy).with_deadline(deadline);
    while !ready() {
        backoff.snooze()?;
    }
    Ok(backoff.stats())
}

/// Like [`poll_wait`], but `progress` is sampled every iteration and any
/// change in its value resets the backoff.
pub fn poll_wait_with_progress(
    policy: &PollingPolicy,
    deadline: Option<Instant>,
    mut ready: impl FnMut() -> bool,
    mut progress: impl FnMut() -> u64,
) -> Result<PollStats, SyncError> {
    let mut backoff = Backoff::new(policy).with_deadline(deadline);
    while !ready() {
        backoff.observe(progress());
        backoff.snooze()?;
    }
    Ok(backoff.stats())
}

const UNLOCKED: u32 = 0;

/// Test-and-test-and-set spinlock serializing metadata mutation. The state
/// word holds `owner + 1` while locked.
#[derive(Debug, Clone, Copy)]
pub struct MetaLock<'a> {
    state: &'a AtomicU32,
    acquisitions: &'a AtomicU64,
}

impl<'a> MetaLock<'a> {
    pub fn from_atomics(state: &'a AtomicU32, acquisitions: &'a AtomicU64) -> Self {
        MetaLock {
            state,
            acquisitions,
        }
    }

    pub fn lock(
        &self,
        rank: u32,
        policy: &PollingPolicy,
        deadline: Option<Instant>,
    ) -> Result<(), SyncError> {
        let mut backoff = Backoff::new(policy).with_deadline(deadline);
        loop {
            if self.state.load(Ordering::Relaxed) == UNLOCKED
                && self
                    .state
                    .compare_exchange_weak(UNLOCKED, rank + 1, Ordering::Acquire, Ordering::Relaxed)
                    .is_ok()
            {
                self.acquisitions.fetch_add(1, Ordering::Relaxed);
                return Ok(());
            }
            backoff.snooze()?;
        }
    }

    pub fn unlock(&self, rank: u32) -> Result<(), SyncError> {
        self.state
            .compare_exchange(rank + 1, UNLOCKED, Ordering::Release, Ordering::Relaxed)
            .map(|_| ())
            .map_err(|cur| SyncError::NotOwner {
                owner: cur.checked_sub(1),
                caller: rank,
            })
    }

    pub fn guard(
        &self,
        rank: u32,
        policy: &PollingPolicy,
        deadline: Option<Instant>,
    ) -> Result<MetaLockGuard<'a>, SyncError> {
        self.lock(rank, policy, deadline)?;
        Ok(MetaLockGuard { lock: *self, rank })
    }

    pub fn owner(&self) -> Option<u32> {
        self.state.load(Ordering::Acquire).checked_sub(1)
    }

    pub fn acquisitions(&self) -> u64 {
        self.acquisitions.load(Ordering::Relaxed)
    }
}

#[derive(Debug)]
pub struct MetaLockGuard<'a> {
    lock: MetaLock<'a>,
    rank: u32,
}

impl Drop for MetaLockGuard<'_> {
    fn drop(&mut self) {
        let released = self.lock.unlock(self.rank);
        debug_assert!(released.is_ok(), "guard lost lock ownership");
    }
}

/// Centralized sense-reversing barrier.
#[derive(Debug, Clone, Copy)]
pub struct Barrier<'a> {
    count: &'a AtomicU32,
    sense: &'a AtomicU32,
    generation: &'a AtomicU64,
    n: u32,
}

/// Per-participant side of a [`Barrier`].
#[derive(Debug, Clone)]
pub struct BarrierState {
    local_sense: u32,
}

impl<'a> Barrier<'a> {
    pub fn from_atomics(
        count: &'a AtomicU32,
        sense: &'a AtomicU32,
        generation: &'a AtomicU64,
        n: u32,
    ) -> Self {
        assert!(n >= 1);
        Barrier {
            count,
            sense,
            generation,
            n,
        }
    }

    /// Joins the barrier; must be called while no barrier episode is in flight.
    pub fn participant(&self) -> BarrierState {
        BarrierState {
            local_sense: self.sense.load(Ordering::Acquire),
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation.load(Ordering::Acquire)
    }

    /// Returns the generation reached. Writes made by any participant before
    /// entering are visible to every participant after it returns.
    pub fn wait(
        &self,
        state: &mut BarrierState,
        policy: &PollingPolicy,
        timeout: Option<Duration>,
    ) -> Result<u64, SyncError> {
        self.wait_with_progress(state, policy, timeout, || 0)
    }

    /// [`Barrier::wait`] that keeps calling `progress` while it waits, so a
    /// rank parked here still drains traffic its peers are blocked on.
    pub fn wait_with_progress(
        &self,
        state: &mut BarrierState,
        policy: &PollingPolicy,
        timeout: Option<Duration>,
        progress: impl FnMut() -> u64,
    ) -> Result<u64, SyncError> {
        state.local_sense ^= 1;
        let sense = state.local_sense;
        let arrived = self.count.fetch_add(1, Ordering::AcqRel) + 1;
        if arrived == self.n {
            self.count.store(0, Ordering::Relaxed);
            let g = self.generation.fetch_add(1, Ordering::Relaxed) + 1;
            self.sense.store(sense, Ordering::Release);
            return Ok(g);
        }
        let deadline = timeout.map(|t| Instant::now() + t);
        poll_wait_with_progress(
            policy,
            deadline,
            || self.sense.load(Ordering::Acquire) == sense,
            progress,
        )?;
        Ok(self.generation.load(Ordering::Relaxed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::thread;

    #[derive(Default)]
    struct Cells {
        a32: AtomicU32,
        b32: AtomicU32,
        a64: AtomicU64,
    }

    #[test]
    fn policy_defaults_are_valid() {
        let p = PollingPolicy::default();
        assert_eq!(p.spin_limit, 1000);
        assert_eq!(p.backoff_initial, Duration::from_micros(1));
        assert_eq!(p.backoff_max, Duration::from_millis(1));
        assert_eq!(p.multiplier, 2);
        p.validate().unwrap();
        let bad = PollingPolicy {
            backoff_initial: Duration::from_millis(2),
            ..p
        };
        assert!(bad.validate().is_err());
        assert!(PollingPolicy { multiplier: 1, ..p }.validate().is_err());
    }

    #[test]
    fn poll_ready_immediately() {
        let stats = poll_wait(&PollingPolicy::default(), None, || true).unwrap();
        assert_eq!(stats.iterations, 0);
        assert_eq!(stats.sleeps, 0);
    }

    #[test]
    fn poll_spins_before_sleeping() {
        let mut checks = 0;
        let stats = poll_wait(&PollingPolicy::default(), None, || {
            checks += 1;
            checks > 10
        })
        .unwrap();
        assert_eq!(stats.iterations, 10);
        assert_eq!(stats.sleeps, 0);
    }

    #[test]
    fn poll_times_out() {
        let policy = PollingPolicy {
            spin_limit: 10,
            ..Default::default()
        };
        let deadline = Some(Instant::now() + Duration::from_millis(20));
        assert!(matches!(
            poll_wait(&policy, deadline, || false),
            Err(SyncError::Timeout(_))
        ));
    }

    #[test]
    fn backoff_schedule_is_geometric_and_capped() {
        let policy = PollingPolicy {
            spin_limit: 3,
            backoff_initial: Duration::from_micros(1),
            backoff_max: Duration::from_micros(64),
            multiplier: 2,
        };
        let mut b = Backoff::new(&policy).recording();
        for _ in 0..15 {
            b.snooze().unwrap();
        }
        let us: Vec<u128> = b.schedule().iter().map(|d| d.as_micros()).collect();
        assert_eq!(us, vec![1, 2, 4, 8, 16, 32, 64, 64, 64, 64, 64, 64]);
    }

    #[test]
    fn progress_resets_backoff() {
        let policy = PollingPolicy {
            spin_limit: 0,
            backoff_initial: Duration::from_micros(1),
            backoff_max: Duration::from_micros(8),
            multiplier: 2,
        };
        let mut b = Backoff::new(&policy).recording();
        let markers = [0, 0, 0, 1, 1, 1, 1, 1];
        for m in markers {
            b.observe(m);
            b.snooze().unwrap();
        }
        let us: Vec<u128> = b.schedule().iter().map(|d| d.as_micros()).collect();
        assert_eq!(us, vec![1, 2, 4, 1, 2, 4, 8, 8]);
        assert_eq!(b.stats().resets, 1);
    }

    #[test]
    fn lock_unlock_and_foreign_unlock() {
        let c = Cells::default();
        let lock = MetaLock::from_atomics(&c.a32, &c.a64);
        let p = PollingPolicy::default();
        lock.lock(0, &p, None).unwrap();
        assert_eq!(lock.owner(), Some(0));
        assert_eq!(
            lock.unlock(1),
            Err(SyncError::NotOwner {
                owner: Some(0),
                caller: 1
            })
        );
        lock.unlock(0).unwrap();
        assert_eq!(lock.owner(), None);
        assert_eq!(lock.acquisitions(), 1);
        assert!(lock.unlock(0).is_err());
    }

    #[test]
    fn lock_times_out_when_held() {
        let c = Cells::default();
        let lock = MetaLock::from_atomics(&c.a32, &c.a64);
        let p = PollingPolicy {
            spin_limit: 10,
            ..Default::default()
        };
        lock.lock(3, &p, None).unwrap();
        let deadline = Some(Instant::now() + Duration::from_millis(10));
        assert!(matches!(lock.lock(1, &p, deadline), Err(SyncError::Timeout(_))));
    }

    #[test]
    fn lock_counts_under_threads() {
        let c = Arc::new(Cells::default());
        let counter = Arc::new(AtomicU64::new(0));
        let threads: Vec<_> = (0..4u32)
            .map(|rank| {
                let c = Arc::clone(&c);
                let counter = Arc::clone(&counter);
                thread::spawn(move || {
                    let lock = MetaLock::from_atomics(&c.a32, &c.a64);
                    let p = PollingPolicy::default();
                    for _ in 0..5_000 {
                        let _g = lock.guard(rank, &p, None).unwrap();
                        // non-atomic read-modify-write; only safe under the lock
                        let v = counter.load(Ordering::Relaxed);
                        counter.store(v + 1, Ordering::Relaxed);
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert_eq!(counter.load(Ordering::Relaxed), 20_000);
        let lock = MetaLock::from_atomics(&c.a32, &c.a64);
        assert_eq!(lock.acquisitions(), 20_000);
    }

    #[test]
    fn single_participant_barrier() {
        let c = Cells::default();
        let b = Barrier::from_atomics(&c.a32, &c.b32, &c.a64, 1);
        let mut st = b.participant();
        let p = PollingPolicy::default();
        assert_eq!(b.wait(&mut st, &p, None).unwrap(), 1);
        assert_eq!(b.wait(&mut st, &p, None).unwrap(), 2);
    }

    #[test]
    fn barrier_fences_writes() {
        let c = Arc::new(Cells::default());
        let ids: Arc<Vec<AtomicU32>> = Arc::new((0..4).map(|_| AtomicU32::new(u32::MAX)).collect());
        let threads: Vec<_> = (0..4u32)
            .map(|rank| {
                let c = Arc::clone(&c);
                let ids = Arc::clone(&ids);
                thread::spawn(move || {
                    let b = Barrier::from_atomics(&c.a32, &c.b32, &c.a64, 4);
                    let mut st = b.participant();
                    let p = PollingPolicy::default();
                    for round in 0..200u32 {
                        ids[rank as usize].store(rank + 4 * round, Ordering::Relaxed);
                        let g = b.wait(&mut st, &p, None).unwrap();
                        assert_eq!(g, 2 * round as u64 + 1);
                        for (r, id) in ids.iter().enumerate() {
                            assert_eq!(id.load(Ordering::Relaxed), r as u32 + 4 * round);
                        }
                        b.wait(&mut st, &p, None).unwrap();
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
    }

    #[test]
    fn barrier_timeout_when_peer_missing() {
        let c = Cells::default();
        let b = Barrier::from_atomics(&c.a32, &c.b32, &c.a64, 2);
        let mut st = b.participant();
        let p = PollingPolicy {
            spin_limit: 10,
            ..Default::default()
        };
        assert!(matches!(
            b.wait(&mut st, &p, Some(Duration::from_millis(10))),
            Err(SyncError::Timeout(_))
        ));
    }
}
