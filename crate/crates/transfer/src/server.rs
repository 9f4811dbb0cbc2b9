//! TCP listener plus the store handler that lets one process serve a
//! shared chunk store to many engines.

use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use bytes::Bytes;
use kvtier_core::storage::{decode_blob, StorageEngine, StorageError, TierId, TierOutcome};
use kvtier_core::KVChunk;
use parking_lot::Mutex;

use crate::body::{read_blob, write_blob, Reader, Writer};
use crate::conn::{ConnConfig, Connection, Handler, Reply, Request};
use crate::wire::{ErrCode, Opcode};
use crate::TransferError;

#[derive(Debug, Clone, Copy)]
pub struct ServerConfig {
    pub conn: ConnConfig,
    pub max_connections: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            conn: ConnConfig::default(),
            max_connections: 1024,
        }
    }
}

struct Shared {
    conns: Mutex<Vec<Connection>>,
    accepted: AtomicUsize,
    stop: AtomicBool,
}

pub struct Server {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    pub fn bind(
        addr: impl ToSocketAddrs,
        handler: Arc<dyn Handler>,
        config: ServerConfig,
    ) -> Result<Self, TransferError> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            conns: Mutex::new(Vec::new()),
            accepted: AtomicUsize::new(0),
            stop: AtomicBool::new(false),
        });
        let s = shared.clone();
        let accept = std::thread::Builder::new()
            .name(format!("accept-{addr}"))
            .spawn(move || accept_loop(listener, handler, config, s))?;
        Ok(Self {
            addr,
            shared,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Connections currently open.
    pub fn connection_count(&self) -> usize {
        let mut c = self.shared.conns.lock();
        c.retain(|c| !c.is_closed());
        c.len()
    }

    pub fn total_accepted(&self) -> usize {
        self.shared.accepted.load(Ordering::Relaxed)
    }

    pub fn connections(&self) -> Vec<Connection> {
        let mut c = self.shared.conns.lock();
        c.retain(|c| !c.is_closed());
        c.clone()
    }

    pub fn shutdown(&mut self) {
        if self.shared.stop.swap(true, Ordering::AcqRel) {
            return;
        }
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for c in self.shared.conns.lock().drain(..) {
            c.close();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(
    listener: TcpListener,
    handler: Arc<dyn Handler>,
    config: ServerConfig,
    shared: Arc<Shared>,
) {
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::Acquire) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                continue;
            }
        };
        let mut conns = shared.conns.lock();
        conns.retain(|c| !c.is_closed());
        if conns.len() >= config.max_connections {
            tracing::warn!("connection limit reached, refusing");
            let _ = stream.shutdown(std::net::Shutdown::Both);
            continue;
        }
        match Connection::from_stream(stream, handler.clone(), config.conn) {
            Ok(c) => {
                shared.accepted.fetch_add(1, Ordering::Relaxed);
                conns.push(c);
            }
            Err(e) => tracing::warn!(error = %e, "connection setup failed"),
        }
    }
}

/// Serves `store` at `addr`.
pub fn serve(addr: impl ToSocketAddrs, store: StorageEngine) -> Result<Server, TransferError> {
    Server::bind(
        addr,
        Arc::new(StoreHandler::new(store)),
        ServerConfig::default(),
    )
}

/// Per-chunk status bytes used in PUT/GET/PIN/COMPRESS replies.
pub mod status {
    pub const STORED: u8 = 0;
    pub const PRESENT: u8 = 1;
    pub const FAILED: u8 = 2;
    pub const MISSING: u8 = 3;
    pub const CORRUPT: u8 = 4;
}

/// Executes store opcodes against a [`StorageEngine`].
///
/// * `PUT`: u8 flags (bit 0 = pin), u8 tier count + tier names (none = the
///   store's fastest tier), u32 count + chunk records. Reply: u32 count +
///   one status byte per chunk.
/// * `GET`: key list. Reply: u32 count, then per key a status byte followed
///   by a chunk record when found.
/// * `EXISTS`: key list. Reply: u32 count, then per key u8 present, u32
///   token count, u32 stored length.
/// * `CLEAR`: tier name (empty = all local tiers) + key list. Reply: removed, refused pinned, refused
///   busy, absent (u32 each).
/// * `PIN`: tier name, u8 on/off, key list. Reply: status byte per key.
/// * `COMPRESS`: tier name, codec name, key list. Reply: per key a status
///   byte and the new u64 size.
pub struct StoreHandler {
    store: StorageEngine,
    default_tiers: Vec<TierId>,
}

impl StoreHandler {
    pub fn new(store: StorageEngine) -> Self {
        let default_tiers = store.tier_ids().into_iter().take(1).collect();
        Self {
            store,
            default_tiers,
        }
    }

    pub fn with_default_tiers(store: StorageEngine, tiers: Vec<TierId>) -> Self {
        Self {
            store,
            default_tiers: tiers,
        }
    }

    pub fn store(&self) -> &StorageEngine {
        &self.store
    }

    fn dispatch(&self, req: &Request<'_>) -> Result<Vec<u8>, (ErrCode, String)> {
        let bad = |e: crate::body::BodyError| (ErrCode::BadRequest, e.to_string());
        let mut r = Reader::new(req.payload);
        let mut w = Writer::new();
        match req.opcode {
            Opcode::Put => {
                let flags = r.u8().map_err(bad)?;
                let ntiers = r.u8().map_err(bad)?;
                let mut tiers = Vec::new();
                for _ in 0..ntiers {
                    let name = r.str().map_err(bad)?;
                    tiers.push(
                        name.parse::<TierId>()
                            .map_err(|e| (ErrCode::BadRequest, e.to_string()))?,
                    );
                }
                if tiers.is_empty() {
                    tiers = self.default_tiers.clone();
                }
                let n = r.count(45).map_err(bad)?;
                let mut handles = Vec::with_capacity(n);
                for _ in 0..n {
                    let blob = read_blob(&mut r).map_err(bad)?;
                    let chunk: Option<KVChunk> = if blob.verify() {
                        decode_blob(&blob).ok()
                    } else {
                        None
                    };
                    handles.push(chunk.map(|c| self.store.put(c, &tiers, flags & 1 != 0)));
                }
                r.finish().map_err(bad)?;
                w.u32(n as u32);
                for h in handles {
                    let st = match h.map(|h| h.wait()) {
                        None => status::CORRUPT,
                        Some(rep) if !rep.all_ok() => status::FAILED,
                        Some(rep)
                            if rep
                                .outcomes
                                .iter()
                                .all(|(_, o)| *o == TierOutcome::AlreadyPresent) =>
                        {
                            status::PRESENT
                        }
                        Some(_) => status::STORED,
                    };
                    w.u8(st);
                }
            }
            Opcode::Get => {
                let keys = r.keys().map_err(bad)?;
                r.finish().map_err(bad)?;
                w.u32(keys.len() as u32);
                for k in &keys {
                    match self.store.get(k, &[]) {
                        Ok(c) => {
                            w.u8(status::STORED);
                            write_blob(
                                &mut w,
                                &kvtier_core::storage::StoredBlob {
                                    meta: kvtier_core::storage::ChunkMeta {
                                        key: c.key().clone(),
                                        token_count: c.token_count(),
                                        num_layers: c.num_layers(),
                                        bytes_per_token_per_layer: c.bytes_per_token_per_layer(),
                                    },
                                    codec: kvtier_core::codec::Codec::Identity,
                                    checksum: c.checksum(),
                                    data: Bytes::clone(c.payload()),
                                },
                            );
                        }
                        Err(StorageError::CorruptChunk) => {
                            w.u8(status::CORRUPT);
                        }
                        Err(_) => {
                            w.u8(status::MISSING);
                        }
                    }
                }
            }
            Opcode::Exists => {
                let keys = r.keys().map_err(bad)?;
                r.finish().map_err(bad)?;
                w.u32(keys.len() as u32);
                for k in &keys {
                    match self.store.entry(k) {
                        Some(e) => {
                            w.u8(1).u32(e.token_count as u32);
                            w.u32(self.store.spec().chunk_bytes(e.token_count) as u32);
                        }
                        None => {
                            w.u8(0).u32(0).u32(0);
                        }
                    }
                }
            }
            Opcode::Clear => {
                let name = r.str().map_err(bad)?;
                let tiers = if name.is_empty() {
                    // every tier this store owns; shared remote tiers are left alone
                    self.store
                        .tier_ids()
                        .into_iter()
                        .filter(|t| !t.is_remote())
                        .collect()
                } else {
                    vec![name
                        .parse::<TierId>()
                        .map_err(|e| (ErrCode::BadRequest, e.to_string()))?]
                };
                let keys = r.keys().map_err(bad)?;
                r.finish().map_err(bad)?;
                let mut rep = kvtier_core::storage::ClearReport::default();
                for (i, t) in tiers.iter().enumerate() {
                    let x = self.store.clear(&keys, t);
                    rep.removed += x.removed;
                    rep.refused_pinned += x.refused_pinned;
                    rep.refused_busy += x.refused_busy;
                    if i == 0 {
                        rep.absent = x.absent;
                    } else {
                        rep.absent = rep.absent.min(x.absent);
                    }
                }
                w.u32(rep.removed as u32)
                    .u32(rep.refused_pinned as u32)
                    .u32(rep.refused_busy as u32)
                    .u32(rep.absent as u32);
            }
            Opcode::Pin => {
                let tier = read_tier(&mut r).map_err(|e| (ErrCode::BadRequest, e))?;
                let on = r.u8().map_err(bad)? != 0;
                let keys = r.keys().map_err(bad)?;
                r.finish().map_err(bad)?;
                w.u32(keys.len() as u32);
                for k in &keys {
                    w.u8(match self.store.pin(k, &tier, on) {
                        Ok(()) => status::STORED,
                        Err(_) => status::MISSING,
                    });
                }
            }
            Opcode::Compress => {
                let tier = read_tier(&mut r).map_err(|e| (ErrCode::BadRequest, e))?;
                let codec = r.str().map_err(bad)?.to_string();
                let keys = r.keys().map_err(bad)?;
                r.finish().map_err(bad)?;
                if kvtier_core::codec::Codec::by_name(&codec).is_err() {
                    return Err((ErrCode::BadRequest, format!("unknown codec {codec:?}")));
                }
                w.u32(keys.len() as u32);
                for k in &keys {
                    match self.store.compress_entry(k, &tier, &codec) {
                        Ok(n) => w.u8(status::STORED).u64(n as u64),
                        Err(_) => w.u8(status::MISSING).u64(0),
                    };
                }
            }
            op => return Err((ErrCode::Unsupported, format!("{op} not served by a store"))),
        }
        Ok(w.finish())
    }
}

fn read_tier(r: &mut Reader<'_>) -> Result<TierId, String> {
    r.str()
        .map_err(|e| e.to_string())?
        .parse::<TierId>()
        .map_err(|e| e.to_string())
}

impl Handler for StoreHandler {
    fn handle(&self, _conn: &Connection, req: Request<'_>) -> Reply {
        match self.dispatch(&req) {
            Ok(p) => Reply::Ok(p),
            Err((code, msg)) => Reply::Err(code, msg),
        }
    }
}
