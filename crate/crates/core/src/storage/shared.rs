//! Reference-counted staging buffers shared by concurrent tier writes.
//!
//! A put to several tiers hands the same [`SharedBuffer`] to every tier
//! writer. Each finished write releases one reference; the region goes back
//! to its [`BufferPool`] when the count reaches zero.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use bytes::Bytes;

#[derive(Default)]
struct PoolStats {
    live_buffers: AtomicUsize,
    live_bytes: AtomicU64,
    outstanding_refs: AtomicUsize,
    total_acquired: AtomicUsize,
}

/// Accounting for in-flight shared buffers.
#[derive(Clone, Default)]
pub struct BufferPool {
    stats: Arc<PoolStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolOccupancy {
    pub buffers: usize,
    pub bytes: u64,
    /// Sum of reference counts over live buffers.
    pub refs: usize,
}

impl BufferPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Wraps `data` with `count` references. `count` must be at least one.
    pub fn share(&self, data: Bytes, count: usize) -> SharedBuffer {
        assert!(count > 0, "shared buffer needs at least one holder");
        let s = &self.stats;
        s.live_buffers.fetch_add(1, Ordering::AcqRel);
        s.live_bytes.fetch_add(data.len() as u64, Ordering::AcqRel);
        s.outstanding_refs.fetch_add(count, Ordering::AcqRel);
        s.total_acquired.fetch_add(1, Ordering::AcqRel);
        SharedBuffer {
            inner: Arc::new(SharedInner {
                data,
                count: AtomicUsize::new(count),
                pool: self.stats.clone(),
            }),
        }
    }

    pub fn occupancy(&self) -> PoolOccupancy {
        let s = &self.stats;
        PoolOccupancy {
            buffers: s.live_buffers.load(Ordering::Acquire),
            bytes: s.live_bytes.load(Ordering::Acquire),
            refs: s.outstanding_refs.load(Ordering::Acquire),
        }
    }

    pub fn total_acquired(&self) -> usize {
        self.stats.total_acquired.load(Ordering::Acquire)
    }
}

struct SharedInner {
    data: Bytes,
    count: AtomicUsize,
    pool: Arc<PoolStats>,
}

/// Handle to a shared region. Cloning the handle does not add a reference;
/// each holder calls [`release`](SharedBuffer::release) once.
#[derive(Clone)]
pub struct SharedBuffer {
    inner: Arc<SharedInner>,
}

impl SharedBuffer {
    pub fn bytes(&self) -> &Bytes {
        &self.inner.data
    }

    pub fn count(&self) -> usize {
        self.inner.count.load(Ordering::Acquire)
    }

    /// Drops one reference. Returns true when this was the last one and the
    /// region was returned to the pool.
    pub fn release(&self) -> bool {
        let prev = self
            .inner
            .count
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |c| c.checked_sub(1))
            .expect("shared buffer released more times than it was shared");
        let pool = &self.inner.pool;
        pool.outstanding_refs.fetch_sub(1, Ordering::AcqRel);
        if prev == 1 {
            pool.live_buffers.fetch_sub(1, Ordering::AcqRel);
            pool.live_bytes
                .fetch_sub(self.inner.data.len() as u64, Ordering::AcqRel);
            true
        } else {
            false
        }
    }
}
