//! Wall or virtual time for the simulated engine.
//!
//! In wall mode compute is a real wait and I/O takes whatever the (throttled)
//! store takes. In virtual mode nothing sleeps: compute advances a counter
//! and each I/O lane is a queue whose service times come from the tier
//! speed model, which makes runs reproducible bit for bit.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Wall,
    Virtual,
}

/// Independent I/O queues in virtual mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Lane {
    Load,
    Store,
    Prefetch,
    Link,
}

#[derive(Default)]
struct Virtual {
    now: Duration,
    lanes: HashMap<Lane, Duration>,
}

pub struct Clock {
    mode: ClockMode,
    origin: Mutex<Instant>,
    virt: Mutex<Virtual>,
}

/// Below this, wall waits spin (yielding) instead of sleeping.
const SPIN: Duration = Duration::from_micros(300);

impl Clock {
    pub fn new(mode: ClockMode) -> Self {
        Self {
            mode,
            origin: Mutex::new(Instant::now()),
            virt: Mutex::new(Virtual::default()),
        }
    }

    pub fn wall() -> Self {
        Self::new(ClockMode::Wall)
    }

    pub fn virtual_time() -> Self {
        Self::new(ClockMode::Virtual)
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn is_virtual(&self) -> bool {
        self.mode == ClockMode::Virtual
    }

    /// Restarts time at zero.
    pub fn reset(&self) {
        *self.origin.lock() = Instant::now();
        *self.virt.lock() = Virtual::default();
    }

    pub fn now(&self) -> Duration {
        match self.mode {
            ClockMode::Wall => self.origin.lock().elapsed(),
            ClockMode::Virtual => self.virt.lock().now,
        }
    }

    /// Waits until `t`. Never moves time backwards.
    pub fn wait_until(&self, t: Duration) {
        match self.mode {
            ClockMode::Wall => {
                let deadline = *self.origin.lock() + t;
                precise_wait(deadline);
            }
            ClockMode::Virtual => {
                let mut v = self.virt.lock();
                v.now = v.now.max(t);
            }
        }
    }

    /// Spends `d` from now.
    pub fn spend(&self, d: Duration) {
        let t = self.now() + d;
        self.wait_until(t);
    }

    /// Queues `d` of service on `lane` starting no earlier than now.
    /// Returns the completion time. Only meaningful in virtual mode; in wall
    /// mode the I/O itself takes the time and this just reports now + `d`.
    pub fn io(&self, lane: Lane, d: Duration) -> Duration {
        match self.mode {
            ClockMode::Wall => self.now() + d,
            ClockMode::Virtual => {
                let mut v = self.virt.lock();
                let now = v.now;
                let free = v.lanes.entry(lane).or_default();
                let end = (*free).max(now) + d;
                *free = end;
                end
            }
        }
    }
}

fn precise_wait(deadline: Instant) {
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let left = deadline - now;
        if left > SPIN {
            std::thread::sleep(left - SPIN);
        } else {
            std::thread::yield_now();
        }
    }
}
