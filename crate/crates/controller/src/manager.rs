//! The manager: token pool plus command dispatch to workers.

use std::collections::BTreeMap;
use std::net::ToSocketAddrs;
use std::sync::Arc;

use kvtier_core::storage::ClearReport;
use kvtier_core::token::chunk_keys;
use kvtier_core::{ChunkKey, KVChunk, TierId, TokenId, DEFAULT_CHUNK_SIZE};
use kvtier_transfer::body::{Reader, Writer};
use kvtier_transfer::{
    Connection, ErrCode, Handler, Opcode, RemoteClient, Reply, Request, Server, ServerConfig,
};
use parking_lot::{Mutex, RwLock};
use serde::Serialize;

use crate::pool::TokenPool;
use crate::proto::{self, EventMsg};
use crate::{ControllerError, InstanceId};

#[derive(Debug, Clone)]
pub struct ManagerConfig {
    pub chunk_size: usize,
    pub model_tag: String,
    /// Upper bound on chunk bytes per PUT during a move.
    pub move_batch_bytes: usize,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            model_tag: kvtier_core::ModelSpec::default().model_tag,
            move_batch_bytes: 32 << 20,
        }
    }
}

/// Per-chunk result of a dispatched clear, pin or compress.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkResult {
    Done,
    Missing,
    Pinned,
    Busy,
    Failed,
}

impl ChunkResult {
    pub fn code(self) -> u8 {
        match self {
            ChunkResult::Done => 0,
            ChunkResult::Missing => 1,
            ChunkResult::Pinned => 2,
            ChunkResult::Busy => 3,
            ChunkResult::Failed => 4,
        }
    }

    pub fn from_code(c: u8) -> Self {
        match c {
            0 => ChunkResult::Done,
            1 => ChunkResult::Missing,
            2 => ChunkResult::Pinned,
            3 => ChunkResult::Busy,
            _ => ChunkResult::Failed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChunkOutcome {
    pub chunk: usize,
    pub result: ChunkResult,
    /// Stored size after compress.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InstanceInfo {
    pub instance: InstanceId,
    pub endpoint: String,
    pub chunks: usize,
}

struct Inner {
    config: ManagerConfig,
    pool: RwLock<TokenPool>,
    workers: Mutex<BTreeMap<InstanceId, Connection>>,
}

#[derive(Clone)]
pub struct Manager {
    inner: Arc<Inner>,
}

impl Manager {
    pub fn new(config: ManagerConfig) -> Self {
        Self {
            inner: Arc::new(Inner {
                config,
                pool: RwLock::new(TokenPool::new()),
                workers: Mutex::new(BTreeMap::new()),
            }),
        }
    }

    /// Listens for workers and admin clients on `addr`.
    pub fn serve(&self, addr: impl ToSocketAddrs) -> Result<Server, ControllerError> {
        Ok(Server::bind(
            addr,
            Arc::new(self.clone()),
            ServerConfig::default(),
        )?)
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.inner.config
    }

    pub fn keys(&self, tokens: &[TokenId]) -> Vec<ChunkKey> {
        chunk_keys(
            tokens,
            self.inner.config.chunk_size,
            &self.inner.config.model_tag,
        )
    }

    pub fn with_pool<R>(&self, f: impl FnOnce(&TokenPool) -> R) -> R {
        f(&self.inner.pool.read())
    }

    /// Matched prefix tokens per instance holding any of `tokens`.
    pub fn lookup(&self, tokens: &[TokenId]) -> BTreeMap<InstanceId, usize> {
        let keys = self.keys(tokens);
        self.inner
            .pool
            .read()
            .lookup(&keys, tokens.len(), self.inner.config.chunk_size)
    }

    pub fn query_ip(
        &self,
        ids: &[InstanceId],
    ) -> BTreeMap<InstanceId, Result<String, ControllerError>> {
        let pool = self.inner.pool.read();
        ids.iter()
            .map(|id| {
                let r = pool
                    .endpoint(id)
                    .map(str::to_string)
                    .ok_or_else(|| ControllerError::UnknownInstance(id.clone()));
                (id.clone(), r)
            })
            .collect()
    }

    pub fn instances(&self) -> Vec<InstanceInfo> {
        self.inner
            .pool
            .read()
            .instances()
            .map(|(id, ep, n)| InstanceInfo {
                instance: id.clone(),
                endpoint: ep.to_string(),
                chunks: n,
            })
            .collect()
    }

    fn worker(&self, id: &str) -> Result<RemoteClient, ControllerError> {
        self.inner
            .workers
            .lock()
            .get(id)
            .filter(|c| !c.is_closed())
            .map(|c| RemoteClient::from_connection(c.clone()))
            .ok_or_else(|| ControllerError::UnknownInstance(id.to_string()))
    }

    /// Asks `instance` to deliver every pending store/evict event. When this
    /// returns, the pool reflects the instance's store as of the call.
    pub fn sync(&self, instance: &str) -> Result<(), ControllerError> {
        let w = self.worker(instance)?;
        w.connection()
            .request(Opcode::Event, &[])
            .map_err(|e| worker_err(instance, e))?;
        Ok(())
    }

    pub fn sync_all(&self) -> Result<(), ControllerError> {
        let ids: Vec<InstanceId> = self.inner.workers.lock().keys().cloned().collect();
        for id in ids {
            self.sync(&id)?;
        }
        Ok(())
    }

    /// Copies the longest prefix of `tokens` that `src` holds to `dst`, then
    /// clears it from `src`'s own tiers. Pinned source copies stay put.
    /// Returns the number of tokens moved.
    pub fn move_tokens(
        &self,
        src: &str,
        dst: &str,
        tokens: &[TokenId],
    ) -> Result<usize, ControllerError> {
        if src == dst {
            return Err(ControllerError::Protocol(
                "source and destination are the same instance".into(),
            ));
        }
        let from = self.worker(src)?;
        let to = self.worker(dst)?;
        let keys = self.keys(tokens);
        let present = from.exists(&keys).map_err(|e| worker_err(src, e))?;
        let n = present.iter().take_while(|p| p.is_some()).count();
        let per_chunk = present
            .first()
            .copied()
            .flatten()
            .map_or(1, |(_, bytes)| bytes.max(1));
        let batch = (self.inner.config.move_batch_bytes / per_chunk).max(1);
        let mut moved = 0usize;
        let mut done: Vec<ChunkKey> = Vec::with_capacity(n);
        'outer: for group in keys[..n].chunks(batch) {
            let mut chunks: Vec<KVChunk> = Vec::with_capacity(group.len());
            for k in group {
                match from.get(k).map_err(|e| worker_err(src, e))? {
                    Some(c) => chunks.push(c),
                    // evicted since the existence check
                    None => {
                        self.put_all(&to, dst, &chunks, &mut done, &mut moved)?;
                        break 'outer;
                    }
                }
            }
            self.put_all(&to, dst, &chunks, &mut done, &mut moved)?;
        }
        if !done.is_empty() {
            from.clear_local(&done).map_err(|e| worker_err(src, e))?;
        }
        self.sync(src)?;
        self.sync(dst)?;
        Ok(moved)
    }

    fn put_all(
        &self,
        to: &RemoteClient,
        dst: &str,
        chunks: &[KVChunk],
        done: &mut Vec<ChunkKey>,
        moved: &mut usize,
    ) -> Result<(), ControllerError> {
        if chunks.is_empty() {
            return Ok(());
        }
        let st = to
            .send_chunks(chunks, &[])
            .map_err(|e| worker_err(dst, e))?;
        for (c, s) in chunks.iter().zip(st) {
            if !s.is_ok() {
                return Err(ControllerError::Worker {
                    instance: dst.to_string(),
                    message: format!("chunk {} not stored: {s:?}", c.key().chunk_index),
                });
            }
            done.push(c.key().clone());
            *moved += c.token_count();
        }
        Ok(())
    }

    pub fn clear(
        &self,
        tokens: &[TokenId],
        instance: &str,
        tier: &TierId,
    ) -> Result<Vec<ChunkOutcome>, ControllerError> {
        let w = self.worker(instance)?;
        let keys = self.keys(tokens);
        let mut out = Vec::with_capacity(keys.len());
        // one request per chunk, pipelined, so each result is itemized
        let pending: Vec<_> = keys
            .iter()
            .map(|k| {
                let mut b = Writer::new();
                b.str(&tier.to_string()).keys(std::slice::from_ref(k));
                w.connection().send_request(Opcode::Clear, &[&b.finish()])
            })
            .collect();
        for (i, p) in pending.into_iter().enumerate() {
            let p = p.map_err(|e| worker_err(instance, e))?;
            let resp = w
                .connection()
                .wait(&p)
                .map_err(|e| worker_err(instance, e))?;
            let mut r = Reader::new(&resp.payload);
            let rep = ClearReport {
                removed: r.u32()? as usize,
                refused_pinned: r.u32()? as usize,
                refused_busy: r.u32()? as usize,
                absent: r.u32()? as usize,
            };
            let result = if rep.removed > 0 {
                ChunkResult::Done
            } else if rep.refused_pinned > 0 {
                ChunkResult::Pinned
            } else if rep.refused_busy > 0 {
                ChunkResult::Busy
            } else {
                ChunkResult::Missing
            };
            out.push(ChunkOutcome {
                chunk: i,
                result,
                size: None,
            });
        }
        self.sync(instance)?;
        Ok(out)
    }

    pub fn pin(
        &self,
        tokens: &[TokenId],
        instance: &str,
        tier: &TierId,
        on: bool,
    ) -> Result<Vec<ChunkOutcome>, ControllerError> {
        let w = self.worker(instance)?;
        let keys = self.keys(tokens);
        let ok = w
            .pin(&keys, tier, on)
            .map_err(|e| worker_err(instance, e))?;
        let mut pool = self.inner.pool.write();
        Ok(keys
            .iter()
            .zip(ok)
            .enumerate()
            .map(|(i, (k, ok))| {
                if ok {
                    pool.set_pinned(instance, k, tier, on);
                }
                ChunkOutcome {
                    chunk: i,
                    result: if ok {
                        ChunkResult::Done
                    } else {
                        ChunkResult::Missing
                    },
                    size: None,
                }
            })
            .collect())
    }

    pub fn compress(
        &self,
        tokens: &[TokenId],
        instance: &str,
        tier: &TierId,
        codec: &str,
    ) -> Result<Vec<ChunkOutcome>, ControllerError> {
        let w = self.worker(instance)?;
        let keys = self.keys(tokens);
        let sizes = w
            .compress(&keys, tier, codec)
            .map_err(|e| worker_err(instance, e))?;
        Ok(sizes
            .into_iter()
            .enumerate()
            .map(|(i, s)| ChunkOutcome {
                chunk: i,
                result: if s.is_some() {
                    ChunkResult::Done
                } else {
                    ChunkResult::Missing
                },
                size: s,
            })
            .collect())
    }

    fn on_event(&self, conn: &Connection, msg: EventMsg) {
        match msg {
            EventMsg::Register {
                instance,
                endpoint,
                snapshot,
            } => {
                tracing::info!(%instance, %endpoint, chunks = snapshot.len(), "worker registered");
                self.inner
                    .pool
                    .write()
                    .register(&instance, &endpoint, snapshot);
                self.inner.workers.lock().insert(instance, conn.clone());
            }
            EventMsg::Batch { instance, events } => {
                let mut pool = self.inner.pool.write();
                for ev in &events {
                    pool.apply(&instance, ev);
                }
            }
            EventMsg::Leave { instance } => self.forget(&instance, None),
        }
    }

    /// Drops an instance, but only if `via` (when given) is still its
    /// registered connection: a worker that already reconnected stays.
    fn forget(&self, instance: &str, via: Option<&Connection>) {
        let mut workers = self.inner.workers.lock();
        if let (Some(c), Some(v)) = (workers.get(instance), via) {
            if c.peer() != v.peer() {
                return;
            }
        }
        workers.remove(instance);
        self.inner.pool.write().unregister(instance);
    }

    fn dispatch(&self, conn: &Connection, req: &Request<'_>) -> Result<Vec<u8>, ControllerError> {
        let mut r = Reader::new(req.payload);
        let mut w = Writer::new();
        match req.opcode {
            Opcode::Event => {
                let msg = EventMsg::decode(req.payload)?;
                self.on_event(conn, msg);
            }
            Opcode::Lookup => match r.u8()? {
                proto::LOOKUP_TOKENS => {
                    let tokens = r.tokens()?;
                    r.finish()?;
                    let hits = self.lookup(&tokens);
                    w.u32(hits.len() as u32);
                    for (id, n) in hits {
                        w.str(&id).u64(n as u64);
                    }
                }
                proto::LOOKUP_QUERY_IP => {
                    let n = r.count(2)?;
                    let ids: Vec<InstanceId> = (0..n)
                        .map(|_| r.str().map(str::to_string))
                        .collect::<Result<_, _>>()?;
                    r.finish()?;
                    let eps = self.query_ip(&ids);
                    w.u32(ids.len() as u32);
                    for id in &ids {
                        match &eps[id] {
                            Ok(ep) => w.str(id).u8(1).str(ep),
                            Err(_) => w.str(id).u8(0).str(""),
                        };
                    }
                }
                proto::LOOKUP_INSTANCES => {
                    r.finish()?;
                    let all = self.instances();
                    w.u32(all.len() as u32);
                    for i in all {
                        w.str(&i.instance).str(&i.endpoint).u64(i.chunks as u64);
                    }
                }
                k => return Err(ControllerError::Protocol(format!("lookup kind {k}"))),
            },
            Opcode::Move => {
                let src = r.str()?.to_string();
                let dst = r.str()?.to_string();
                let tokens = r.tokens()?;
                r.finish()?;
                w.u64(self.move_tokens(&src, &dst, &tokens)? as u64);
            }
            Opcode::Clear | Opcode::Pin | Opcode::Compress => {
                let instance = r.str()?.to_string();
                let tier = proto::read_tier(&mut r)?;
                let on = if req.opcode == Opcode::Pin {
                    r.u8()? != 0
                } else {
                    true
                };
                let codec = if req.opcode == Opcode::Compress {
                    Some(r.str()?.to_string())
                } else {
                    None
                };
                let tokens = r.tokens()?;
                r.finish()?;
                let out = match req.opcode {
                    Opcode::Clear => self.clear(&tokens, &instance, &tier)?,
                    Opcode::Pin => self.pin(&tokens, &instance, &tier, on)?,
                    _ => {
                        self.compress(&tokens, &instance, &tier, codec.as_deref().unwrap_or(""))?
                    }
                };
                w.u32(out.len() as u32);
                for o in out {
                    w.u8(o.result.code()).u64(o.size.unwrap_or(0));
                }
            }
            op => {
                return Err(ControllerError::Protocol(format!(
                    "{op} not served by the manager"
                )))
            }
        }
        Ok(w.finish())
    }
}

fn worker_err(instance: &str, e: kvtier_transfer::TransferError) -> ControllerError {
    match e {
        kvtier_transfer::TransferError::Remote { message, .. } => ControllerError::Worker {
            instance: instance.to_string(),
            message,
        },
        e => ControllerError::Worker {
            instance: instance.to_string(),
            message: e.to_string(),
        },
    }
}

impl Handler for Manager {
    fn handle(&self, conn: &Connection, req: Request<'_>) -> Reply {
        match self.dispatch(conn, &req) {
            Ok(p) => Reply::Ok(p),
            Err(e) => {
                let code = match &e {
                    ControllerError::UnknownInstance(_) => ErrCode::UnknownInstance,
                    ControllerError::Protocol(_) => ErrCode::BadRequest,
                    _ => ErrCode::Internal,
                };
                Reply::Err(code, e.to_string())
            }
        }
    }

    fn on_close(&self, conn: &Connection) {
        let gone: Vec<InstanceId> = self
            .inner
            .workers
            .lock()
            .iter()
            .filter(|(_, c)| c.peer() == conn.peer())
            .map(|(id, _)| id.clone())
            .collect();
        for id in gone {
            tracing::info!(instance = %id, "worker disconnected");
            self.forget(&id, Some(conn));
        }
    }
}
