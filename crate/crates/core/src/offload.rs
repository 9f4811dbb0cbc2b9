//! Dynamic offloading of free GPU pages.
//!
//! Free pages are duplicated into the RAM tier ahead of allocation so that
//! whatever they held survives being handed to a new query. Three cursors
//! over the free-page list drive it:
//!
//! ```text
//!  start            consumed      current            end
//!    |----granted-----|---duplicated--|---scheduled----|---untouched---|
//! ```
//!
//! Allocation only hands out duplicated pages. If too few are ready the
//! caller gets [`AllocOutcome::Stall`] and retries after more `advance`
//! calls.

use crate::kv::PageId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OffloadState {
    /// `start == current < end`: pages scheduled, none duplicated yet.
    Init,
    /// `start < current < end`.
    InProgress,
    /// A query just took pages and moved `end` forward.
    QueryArrival,
    /// `current == end`: everything scheduled is duplicated.
    Steady,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AllocOutcome {
    Granted(Vec<PageId>),
    /// Not enough duplicated pages yet; `needed` more must be duplicated.
    Stall {
        needed: usize,
    },
    /// The request exceeds the pages left in the list.
    Insufficient {
        requested: usize,
        remaining: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffloadWindow {
    free_pages: Vec<PageId>,
    current: usize,
    end: usize,
    consumed: usize,
    window_size: usize,
    /// Largest stalled request not yet granted; stretches the window.
    pending: usize,
    arrival: bool,
}

impl OffloadWindow {
    pub fn init(free_pages: Vec<PageId>, window_size: usize) -> Self {
        let end = window_size.min(free_pages.len());
        Self {
            free_pages,
            current: 0,
            end,
            consumed: 0,
            window_size,
            pending: 0,
            arrival: false,
        }
    }

    pub fn start(&self) -> usize {
        0
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn cursors(&self) -> (usize, usize, usize) {
        (0, self.current, self.end)
    }

    pub fn free_pages(&self) -> &[PageId] {
        &self.free_pages
    }

    /// Where `end` belongs: `window_size` (or the pending stall) past the
    /// granted prefix, never behind `current`.
    fn target(&self) -> usize {
        (self.consumed + self.window_size.max(self.pending))
            .min(self.free_pages.len())
            .max(self.current)
    }

    /// Duplicated pages not yet granted.
    pub fn ready(&self) -> usize {
        self.current - self.consumed
    }

    /// Pages in the list not yet granted.
    pub fn remaining(&self) -> usize {
        self.free_pages.len() - self.consumed
    }

    pub fn state(&self) -> OffloadState {
        if self.current == self.end {
            OffloadState::Steady
        } else if self.arrival {
            OffloadState::QueryArrival
        } else if self.current == 0 {
            OffloadState::Init
        } else {
            OffloadState::InProgress
        }
    }

    /// Duplicates up to `batch` scheduled pages through `duplicate`, then
    /// moves `current` past them. Nothing moves if `duplicate` fails.
    pub fn advance<E>(
        &mut self,
        batch: usize,
        duplicate: impl FnOnce(&[PageId]) -> Result<(), E>,
    ) -> Result<Vec<PageId>, E> {
        let k = batch.min(self.end - self.current);
        if k == 0 {
            return Ok(Vec::new());
        }
        let pages = &self.free_pages[self.current..self.current + k];
        duplicate(pages)?;
        let out = pages.to_vec();
        self.current += k;
        self.arrival = false;
        Ok(out)
    }

    /// [`advance`](Self::advance) with no I/O, for tests and models.
    pub fn advance_noop(&mut self, batch: usize) -> Vec<PageId> {
        self.advance(batch, |_| Ok::<(), std::convert::Infallible>(()))
            .unwrap_or_else(|e| match e {})
    }

    pub fn on_alloc(&mut self, n: usize) -> AllocOutcome {
        if n == 0 {
            return AllocOutcome::Granted(Vec::new());
        }
        if n > self.remaining() {
            return AllocOutcome::Insufficient {
                requested: n,
                remaining: self.remaining(),
            };
        }
        if self.ready() >= n {
            let granted = self.free_pages[self.consumed..self.consumed + n].to_vec();
            self.consumed += n;
            if n >= self.pending {
                self.pending = 0;
            }
            // end moves forward by n, or back to the window once a
            // stretching stall is served
            self.end = self.target();
            self.arrival = self.current < self.end;
            return AllocOutcome::Granted(granted);
        }
        // Make sure the shortfall is scheduled so repeated advances resolve it.
        self.pending = self.pending.max(n);
        self.end = self.end.max(self.target());
        self.arrival = false;
        AllocOutcome::Stall {
            needed: n - self.ready(),
        }
    }

    /// Appends pages freed by finished queries to the tail of the list.
    pub fn extend_free(&mut self, pages: impl IntoIterator<Item = PageId>) {
        self.free_pages.extend(pages);
        self.end = self.end.max(self.target());
    }

    /// Checks the cursor invariants. `pending` is the largest outstanding
    /// stalled request, which may stretch the window past `window_size`.
    pub fn check(&self, pending: usize) -> Result<(), String> {
        let pending = pending.max(self.pending);
        let n = self.free_pages.len();
        if !(self.consumed <= self.current && self.current <= self.end && self.end <= n) {
            return Err(format!(
                "cursor order broken: consumed {} current {} end {} len {n}",
                self.consumed, self.current, self.end
            ));
        }
        if self.ready() > self.window_size.max(pending) {
            return Err(format!(
                "{} duplicated pages exceed window {}",
                self.ready(),
                self.window_size
            ));
        }
        let expect = match (self.current == self.end, self.current == 0) {
            (true, _) => OffloadState::Steady,
            (false, true) => OffloadState::Init,
            (false, false) => OffloadState::InProgress,
        };
        let st = self.state();
        if st != expect && !(st == OffloadState::QueryArrival && expect != OffloadState::Steady) {
            return Err(format!("state {st:?} but cursors say {expect:?}"));
        }
        Ok(())
    }
}
