//! Bounded background worker pool for tier I/O.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{unbounded, Sender};
use parking_lot::{Condvar, Mutex};

type Job = Box<dyn FnOnce() + Send + 'static>;

struct Idle {
    in_flight: AtomicUsize,
    lock: Mutex<()>,
    cv: Condvar,
}

pub struct WorkerPool {
    tx: Option<Sender<Job>>,
    threads: Vec<JoinHandle<()>>,
    idle: Arc<Idle>,
}

impl WorkerPool {
    pub fn new(name: &str, threads: usize) -> Self {
        let (tx, rx) = unbounded::<Job>();
        let idle = Arc::new(Idle {
            in_flight: AtomicUsize::new(0),
            lock: Mutex::new(()),
            cv: Condvar::new(),
        });
        let threads = (0..threads.max(1))
            .map(|i| {
                let rx = rx.clone();
                let idle = idle.clone();
                std::thread::Builder::new()
                    .name(format!("{name}-{i}"))
                    .spawn(move || {
                        for job in rx {
                            job();
                            if idle.in_flight.fetch_sub(1, Ordering::AcqRel) == 1 {
                                let _g = idle.lock.lock();
                                idle.cv.notify_all();
                            }
                        }
                    })
                    .expect("spawn worker")
            })
            .collect();
        Self {
            tx: Some(tx),
            threads,
            idle,
        }
    }

    pub fn submit(&self, job: impl FnOnce() + Send + 'static) {
        self.idle.in_flight.fetch_add(1, Ordering::AcqRel);
        self.tx
            .as_ref()
            .expect("pool alive")
            .send(Box::new(job))
            .expect("workers alive");
    }

    pub fn in_flight(&self) -> usize {
        self.idle.in_flight.load(Ordering::Acquire)
    }

    /// Blocks until every submitted job, including ones submitted by jobs,
    /// has finished.
    pub fn wait_idle(&self) {
        let mut g = self.idle.lock.lock();
        while self.idle.in_flight.load(Ordering::Acquire) != 0 {
            self.idle
                .cv
                .wait_for(&mut g, std::time::Duration::from_millis(20));
        }
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.tx.take();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}
