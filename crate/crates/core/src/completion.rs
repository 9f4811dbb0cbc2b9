use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};

/// One-shot result slot that any number of callers can wait on.
///
/// Waiting twice returns the same value.
pub struct Completion<T> {
    inner: Arc<(Mutex<Option<T>>, Condvar)>,
}

impl<T> Clone for Completion<T> {
    fn clone(&self) -> Self {
        Self {
            inner: self.inner.clone(),
        }
    }
}

impl<T: Clone> Default for Completion<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Clone> Completion<T> {
    pub fn new() -> Self {
        Self {
            inner: Arc::new((Mutex::new(None), Condvar::new())),
        }
    }

    pub fn ready(value: T) -> Self {
        Self {
            inner: Arc::new((Mutex::new(Some(value)), Condvar::new())),
        }
    }

    /// Fills the slot. Later calls are ignored.
    pub fn complete(&self, value: T) {
        let (lock, cv) = &*self.inner;
        let mut slot = lock.lock();
        if slot.is_none() {
            *slot = Some(value);
            cv.notify_all();
        }
    }

    pub fn is_done(&self) -> bool {
        self.inner.0.lock().is_some()
    }

    pub fn try_get(&self) -> Option<T> {
        self.inner.0.lock().clone()
    }

    pub fn wait(&self) -> T {
        let (lock, cv) = &*self.inner;
        let mut slot = lock.lock();
        while slot.is_none() {
            cv.wait(&mut slot);
        }
        slot.clone().unwrap()
    }

    pub fn wait_timeout(&self, timeout: Duration) -> Option<T> {
        let (lock, cv) = &*self.inner;
        let mut slot = lock.lock();
        if slot.is_none() {
            cv.wait_for(&mut slot, timeout);
        }
        slot.clone()
    }
}
