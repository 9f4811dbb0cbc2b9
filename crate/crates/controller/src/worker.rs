//! Per-instance worker: reports store/evict events to the manager and
//! executes the store commands the manager sends back on the same
//! connection.

use std::net::{SocketAddr, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, OnceLock, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{Receiver, Select, TryRecvError};
use kvtier_core::storage::StoreEvent;
use kvtier_core::StorageEngine;
use kvtier_transfer::{
    ConnConfig, Connection, Handler, Opcode, Reply, Request, Router, StoreHandler,
};
use parking_lot::Mutex;

use crate::proto::EventMsg;
use crate::{ControllerError, InstanceId};

const MAX_BATCH: usize = 4096;

struct Inner {
    instance: InstanceId,
    endpoint: String,
    store: StorageEngine,
    conn: Mutex<Connection>,
    /// Held while events are taken off the channel and sent, so a flush
    /// cannot overtake events already taken by the pump.
    events: Mutex<Receiver<StoreEvent>>,
    stop: AtomicBool,
    batches: AtomicU64,
}

impl Inner {
    fn send(&self, events: Vec<StoreEvent>) -> Result<(), ControllerError> {
        let msg = EventMsg::Batch {
            instance: self.instance.clone(),
            events,
        };
        let conn = self.conn.lock().clone();
        conn.request(Opcode::Event, &msg.encode())?;
        self.batches.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    fn flush(&self) -> Result<(), ControllerError> {
        self.store.quiesce();
        let rx = self.events.lock();
        loop {
            let batch: Vec<StoreEvent> = rx.try_iter().take(MAX_BATCH).collect();
            if batch.is_empty() {
                return Ok(());
            }
            self.send(batch)?;
        }
    }

    fn pump(&self, watch: Receiver<StoreEvent>) {
        while !self.stop.load(Ordering::Acquire) {
            // wait for an event without taking it, then drain under the lock
            let mut sel = Select::new();
            sel.recv(&watch);
            if sel.ready_timeout(Duration::from_millis(50)).is_err() {
                continue;
            }
            let rx = self.events.lock();
            let mut batch = Vec::new();
            let mut closed = false;
            while batch.len() < MAX_BATCH {
                match rx.try_recv() {
                    Ok(ev) => batch.push(ev),
                    Err(TryRecvError::Empty) => break,
                    Err(TryRecvError::Disconnected) => {
                        closed = true;
                        break;
                    }
                }
            }
            if !batch.is_empty() {
                if let Err(e) = self.send(batch) {
                    // lost events are recovered by the snapshot on reconnect
                    tracing::warn!(instance = %self.instance, error = %e, "event delivery failed");
                }
            }
            if closed {
                return;
            }
        }
    }

    fn register(&self, conn: &Connection) -> Result<(), ControllerError> {
        let msg = EventMsg::Register {
            instance: self.instance.clone(),
            endpoint: self.endpoint.clone(),
            snapshot: self.store.entries(),
        };
        conn.request(Opcode::Event, &msg.encode())?;
        Ok(())
    }
}

/// Answers the manager's sync request: a bare EVENT. The flush itself sends
/// EVENT requests on this connection, so it cannot run on the reader thread.
struct Sync(OnceLock<Weak<Inner>>);

impl Handler for Sync {
    fn handle(&self, conn: &Connection, req: Request<'_>) -> Reply {
        let Some(inner) = self.0.get().and_then(Weak::upgrade) else {
            return Reply::Err(kvtier_transfer::ErrCode::Internal, "worker gone".into());
        };
        let conn = conn.clone();
        let id = req.request_id;
        std::thread::spawn(move || {
            let reply = match inner.flush() {
                Ok(()) => Reply::empty(),
                Err(e) => Reply::Err(kvtier_transfer::ErrCode::Internal, e.to_string()),
            };
            conn.reply(id, reply);
        });
        Reply::Deferred
    }
}

pub struct Worker {
    inner: Arc<Inner>,
    sync: Arc<Sync>,
    pump: Option<JoinHandle<()>>,
}

impl Worker {
    /// Connects to the manager at `manager`, registers a snapshot of
    /// `store`, and starts forwarding its events. `endpoint` is what
    /// `query_ip` reports for this instance.
    pub fn connect(
        instance: &str,
        endpoint: &str,
        store: StorageEngine,
        manager: impl ToSocketAddrs,
    ) -> Result<Self, ControllerError> {
        // subscribe before the snapshot so nothing falls between them
        let rx = store.subscribe();
        let watch = rx.clone();
        let sync = Arc::new(Sync(OnceLock::new()));
        let conn = Self::dial(&store, &sync, manager)?;
        let inner = Arc::new(Inner {
            instance: instance.to_string(),
            endpoint: endpoint.to_string(),
            store,
            conn: Mutex::new(conn.clone()),
            events: Mutex::new(rx),
            stop: AtomicBool::new(false),
            batches: AtomicU64::new(0),
        });
        let _ = sync.0.set(Arc::downgrade(&inner));
        inner.register(&conn)?;
        let p = inner.clone();
        let pump = std::thread::Builder::new()
            .name(format!("events-{instance}"))
            .spawn(move || p.pump(watch))
            .map_err(|e| ControllerError::Transfer(e.into()))?;
        Ok(Self {
            inner,
            sync,
            pump: Some(pump),
        })
    }

    fn dial(
        store: &StorageEngine,
        sync: &Arc<Sync>,
        addr: impl ToSocketAddrs,
    ) -> Result<Connection, ControllerError> {
        let handler = Router::new()
            .route(
                &[
                    Opcode::Put,
                    Opcode::Get,
                    Opcode::Exists,
                    Opcode::Clear,
                    Opcode::Pin,
                    Opcode::Compress,
                ],
                Arc::new(StoreHandler::new(store.clone())),
            )
            .route(&[Opcode::Event], sync.clone());
        Ok(Connection::connect_with(
            addr,
            Arc::new(handler),
            ConnConfig::default(),
        )?)
    }

    /// Connects to a (possibly restarted) manager and re-registers.
    pub fn reconnect(&self, manager: impl ToSocketAddrs) -> Result<(), ControllerError> {
        let conn = Self::dial(&self.inner.store, &self.sync, manager)?;
        // no event may be sent between the snapshot and the switch
        let _rx = self.inner.events.lock();
        self.inner.register(&conn)?;
        let old = std::mem::replace(&mut *self.inner.conn.lock(), conn);
        old.close();
        Ok(())
    }

    /// Sends every event the store has produced so far.
    pub fn flush_events(&self) -> Result<(), ControllerError> {
        self.inner.flush()
    }

    pub fn instance(&self) -> &str {
        &self.inner.instance
    }

    pub fn store(&self) -> &StorageEngine {
        &self.inner.store
    }

    pub fn manager_addr(&self) -> SocketAddr {
        self.inner.conn.lock().peer()
    }

    /// Event messages delivered so far.
    pub fn batches_sent(&self) -> u64 {
        self.inner.batches.load(Ordering::Relaxed)
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.inner.stop.store(true, Ordering::Release);
        if let Some(h) = self.pump.take() {
            let _ = h.join();
        }
        let conn = self.inner.conn.lock().clone();
        let leave = EventMsg::Leave {
            instance: self.inner.instance.clone(),
        };
        let _ = conn.request(Opcode::Event, &leave.encode());
        conn.close();
    }
}
