//! Engine-facing KV connector.
//!
//! Scheduler side: [`get_num_new_matched_tokens`], [`update_state_after_alloc`]
//! and [`build_connector_meta`]. Model-runner side: [`start_load_kv`],
//! [`wait_load_kv`], [`start_store_kv`] and [`wait_store_kv`].
//!
//! In layerwise mode `start_load_kv` fetches layer 0 only and
//! `wait_load_kv(L)` waits for layer `L`, then starts `L + 1`. Each
//! `start_store_kv` stores the next layer; the engine calls
//! `wait_store_kv(L - 1)` before `start_store_kv` for `L`. In blocking mode
//! `start_load_kv` loads everything and `start_store_kv` stores everything
//! before returning.
//!
//! [`get_num_new_matched_tokens`]: KvConnector::get_num_new_matched_tokens
//! [`update_state_after_alloc`]: KvConnector::update_state_after_alloc
//! [`build_connector_meta`]: KvConnector::build_connector_meta
//! [`start_load_kv`]: KvConnector::start_load_kv
//! [`wait_load_kv`]: KvConnector::wait_load_kv
//! [`start_store_kv`]: KvConnector::start_store_kv
//! [`wait_store_kv`]: KvConnector::wait_store_kv

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use kvtier_core::pool::WorkerPool;
use kvtier_core::storage::{Lease, TierOutcome};
use kvtier_core::token::{chunk_keys, matched_prefix, ChunkSpan};
use kvtier_core::{
    ChunkDescriptor, ChunkKey, ChunkLocation, Completion, KVChunk, KvError, PageId, PagedKVStore,
    QueryId, StorageEngine, TierId, TierSpeed, TokenId,
};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, Lane};
use crate::events::{EventKind, EventLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    Layerwise,
    Blocking,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadFault {
    pub query: QueryId,
    pub key: ChunkKey,
    /// Tokens before the lost chunk, all of which were loaded.
    pub safe_prefix: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConnectorError {
    #[error("query {query}: {blocks} pages allocated, {external} external, {needed} needed")]
    InconsistentAlloc {
        query: QueryId,
        blocks: usize,
        external: usize,
        needed: usize,
    },
    #[error("query {0} has no scheduler state")]
    UnknownQuery(QueryId),
    #[error("{} chunk(s) missing, first for query {}", .0.len(), .0[0].query)]
    ChunkMissing(Vec<LoadFault>),
    #[error(transparent)]
    Kv(#[from] KvError),
}

/// One chunk transfer between a tier and engine pages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedChunk {
    /// `span` is the tokens moved; `location` the source tier for loads
    /// and the target tier for stores.
    pub desc: ChunkDescriptor,
    /// Token count of the stored chunk (at least `span.len()`).
    pub chunk_tokens: usize,
    /// Pages holding `span`, in token order.
    pub pages: Vec<PageId>,
}

/// Transfer plan of one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectorMetadata {
    pub query_id: QueryId,
    pub matched_tokens: usize,
    pub total_tokens: usize,
    /// Every page of the query.
    pub pages: Vec<PageId>,
    pub load: Vec<PlannedChunk>,
    pub store: Vec<PlannedChunk>,
    pub mode: TransferMode,
}

impl ConnectorMetadata {
    pub fn load_tokens(&self) -> usize {
        self.load.iter().map(|c| c.desc.span.len()).sum()
    }
}

/// Plans for one scheduling step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchMetadata {
    pub id: u64,
    pub mode: TransferMode,
    pub queries: Vec<ConnectorMetadata>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SchedulerOutput {
    pub queries: Vec<QueryId>,
}

/// The seven engine-facing calls plus hooks for prefetch and decode-time
/// storing.
pub trait KvConnector: Send + Sync {
    /// Cached prefix length, capped at `tokens.len() - 1` so the engine
    /// always computes at least one token.
    fn get_num_new_matched_tokens(&self, query: QueryId, tokens: &[TokenId]) -> usize;

    fn update_state_after_alloc(
        &self,
        query: QueryId,
        blocks: &[PageId],
        num_external_blocks: usize,
    ) -> Result<(), ConnectorError>;

    fn build_connector_meta(
        &self,
        output: &SchedulerOutput,
    ) -> Result<BatchMetadata, ConnectorError>;

    fn start_load_kv(&self, meta: &BatchMetadata) -> Result<(), ConnectorError>;

    fn wait_load_kv(&self, meta: &BatchMetadata, layer: usize) -> Result<(), ConnectorError>;

    fn start_store_kv(&self, meta: &BatchMetadata) -> Result<(), ConnectorError>;

    fn wait_store_kv(&self, meta: &BatchMetadata, layer: usize) -> Result<(), ConnectorError>;

    /// Called when a query is queued. May move its chunks to a faster tier.
    fn prefetch(&self, _query: QueryId, _tokens: &[TokenId]) {}

    /// Decode is about to start; `pages` hold the KV of `history`.
    fn begin_decode(&self, _query: QueryId, _history: &[TokenId], _pages: &[PageId]) {}

    /// Token `token` at position `pos` has had its KV written to `pages`.
    fn save_decode_token(&self, _query: QueryId, _token: TokenId, _pos: usize, _pages: &[PageId]) {}

    fn finish_decode(&self, _query: QueryId) {}

    fn request_finished(&self, _query: QueryId) {}
}

/// Connector for engines without a cache: nothing matches, nothing moves.
pub struct NoopConnector {
    mode: TransferMode,
    log: Arc<EventLog>,
    next: AtomicU64,
    pending: Mutex<HashMap<QueryId, (usize, Vec<PageId>)>>,
}

impl NoopConnector {
    pub fn new(mode: TransferMode, log: Arc<EventLog>) -> Self {
        Self {
            mode,
            log,
            next: AtomicU64::new(0),
            pending: Mutex::new(HashMap::new()),
        }
    }
}

impl KvConnector for NoopConnector {
    fn get_num_new_matched_tokens(&self, query: QueryId, tokens: &[TokenId]) -> usize {
        self.log
            .record(EventKind::GetMatched, None, Some(query), None);
        self.pending
            .lock()
            .insert(query, (tokens.len(), Vec::new()));
        0
    }

    fn update_state_after_alloc(
        &self,
        query: QueryId,
        blocks: &[PageId],
        _: usize,
    ) -> Result<(), ConnectorError> {
        self.log
            .record(EventKind::UpdateAlloc, None, Some(query), None);
        let mut p = self.pending.lock();
        let e = p
            .get_mut(&query)
            .ok_or(ConnectorError::UnknownQuery(query))?;
        e.1 = blocks.to_vec();
        Ok(())
    }

    fn build_connector_meta(
        &self,
        output: &SchedulerOutput,
    ) -> Result<BatchMetadata, ConnectorError> {
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        self.log.record(EventKind::BuildMeta, Some(id), None, None);
        let mut p = self.pending.lock();
        let queries = output
            .queries
            .iter()
            .map(|&q| {
                let (n, pages) = p.remove(&q).ok_or(ConnectorError::UnknownQuery(q))?;
                Ok(ConnectorMetadata {
                    query_id: q,
                    matched_tokens: 0,
                    total_tokens: n,
                    pages,
                    load: Vec::new(),
                    store: Vec::new(),
                    mode: self.mode,
                })
            })
            .collect::<Result<_, ConnectorError>>()?;
        Ok(BatchMetadata {
            id,
            mode: self.mode,
            queries,
        })
    }

    fn start_load_kv(&self, meta: &BatchMetadata) -> Result<(), ConnectorError> {
        self.log
            .record(EventKind::StartLoad, Some(meta.id), None, None);
        Ok(())
    }

    fn wait_load_kv(&self, meta: &BatchMetadata, layer: usize) -> Result<(), ConnectorError> {
        self.log
            .record(EventKind::WaitLoad, Some(meta.id), None, Some(layer));
        Ok(())
    }

    fn start_store_kv(&self, meta: &BatchMetadata) -> Result<(), ConnectorError> {
        self.log
            .record(EventKind::StartStore, Some(meta.id), None, None);
        Ok(())
    }

    fn wait_store_kv(&self, meta: &BatchMetadata, layer: usize) -> Result<(), ConnectorError> {
        self.log
            .record(EventKind::WaitStore, Some(meta.id), None, Some(layer));
        Ok(())
    }

    fn request_finished(&self, query: QueryId) {
        self.pending.lock().remove(&query);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ConnectorConfig {
    pub mode: TransferMode,
    /// Tiers new chunks are written to; empty means the store's fastest.
    pub store_tiers: Vec<TierId>,
    /// Read preference for loads; empty means speed order.
    pub load_prefer: Vec<TierId>,
    pub prefetch: bool,
    pub prefetch_tier: TierId,
    /// Budget for the per-layer staging buffers of all running queries.
    pub staging_bytes: usize,
    /// Store new chunks at all.
    pub store: bool,
    /// Store decode-time KV through the store's decode accumulator.
    pub save_decode: bool,
    /// Device speeds charged in virtual time, by tier name. Tiers not
    /// listed fall back to the store's configured speed.
    pub model_speeds: BTreeMap<String, TierSpeed>,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        Self {
            mode: TransferMode::Layerwise,
            store_tiers: Vec::new(),
            load_prefer: Vec::new(),
            prefetch: false,
            prefetch_tier: TierId::RamPool,
            staging_bytes: 256 << 20,
            store: true,
            save_decode: true,
            model_speeds: BTreeMap::new(),
        }
    }
}

/// Byte budget for layer staging buffers.
#[derive(Default)]
pub struct StagingPool {
    capacity: usize,
    reserved: Mutex<usize>,
    in_use: AtomicUsize,
    peak: AtomicUsize,
}

impl StagingPool {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ..Default::default()
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn reserved(&self) -> usize {
        *self.reserved.lock()
    }

    /// Highest number of staging bytes touched at once.
    pub fn peak_in_use(&self) -> usize {
        self.peak.load(Ordering::Relaxed)
    }

    pub fn reset_peak(&self) {
        self.peak.store(0, Ordering::Relaxed);
    }

    fn reserve(&self, n: usize) -> bool {
        let mut r = self.reserved.lock();
        if *r + n > self.capacity {
            return false;
        }
        *r += n;
        true
    }

    fn unreserve(&self, n: usize) {
        *self.reserved.lock() -= n;
    }

    fn touch(&self, n: usize) -> InUse<'_> {
        let now = self.in_use.fetch_add(n, Ordering::AcqRel) + n;
        self.peak.fetch_max(now, Ordering::AcqRel);
        InUse { pool: self, n }
    }
}

struct InUse<'a> {
    pool: &'a StagingPool,
    n: usize,
}

impl Drop for InUse<'_> {
    fn drop(&mut self) {
        self.pool.in_use.fetch_sub(self.n, Ordering::AcqRel);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub stored: u64,
    pub present: u64,
    pub failed: u64,
    pub loaded_chunks: u64,
    pub missing_chunks: u64,
}

struct SchedState {
    tokens: Arc<[TokenId]>,
    keys: Vec<ChunkKey>,
    matched: usize,
    pages: Vec<PageId>,
    external: usize,
}

/// Completion carrying the virtual finish time (zero in wall mode).
type Ticket = Completion<Duration>;

struct Run {
    meta: BatchMetadata,
    /// Byte offset of each query's region in the load and store buffers.
    load_off: Vec<usize>,
    store_off: Vec<usize>,
    load_buf: Mutex<Vec<u8>>,
    store_buf: Mutex<Vec<u8>>,
    load_bytes: usize,
    store_bytes: usize,
    reserved: usize,
    loads: Mutex<Vec<Option<Ticket>>>,
    stores: Mutex<Vec<Option<Ticket>>>,
    next_store: AtomicUsize,
    /// First lost load-plan chunk per query.
    bad: Mutex<Vec<Option<usize>>>,
    faults: Mutex<Vec<LoadFault>>,
    /// Whole-chunk buffers being filled layer by layer, per query and chunk.
    assembly: Mutex<Vec<Vec<Vec<u8>>>>,
    /// No load completes before this (pending prefetches).
    ready_at: Duration,
    _lease: Lease,
}

struct Shared {
    storage: StorageEngine,
    pages: Arc<PagedKVStore>,
    config: ConnectorConfig,
    store_tiers: Vec<TierId>,
    clock: Arc<Clock>,
    log: Arc<EventLog>,
    staging: StagingPool,
    stats: Mutex<StoreStats>,
    /// Virtual time each prefetched chunk lands on the prefetch tier.
    prefetched: Mutex<HashMap<ChunkKey, Duration>>,
}

impl Shared {
    /// Virtual runs must not let a background flush race later lookups.
    fn settle(&self) {
        if self.clock.is_virtual() {
            self.storage.quiesce();
        }
    }

    fn speed(&self, tier: &TierId) -> TierSpeed {
        if self.clock.is_virtual() {
            if let Some(s) = self.config.model_speeds.get(&tier.to_string()) {
                return *s;
            }
        }
        self.storage.tier_speed(tier)
    }

    fn holding_tier(&self, key: &ChunkKey) -> Option<TierId> {
        let held = self.storage.contains(key);
        self.config
            .load_prefer
            .iter()
            .find(|t| held.contains(*t))
            .cloned()
            .or_else(|| held.into_iter().next())
    }

    fn layer_len(&self, tokens: usize) -> usize {
        self.storage.spec().layer_bytes(tokens)
    }

    /// Loads one layer of every layerwise query in `run`. Returns the
    /// modeled I/O time.
    fn load_layer(&self, run: &Run, layer: usize) -> Duration {
        let spec = self.storage.spec();
        let bpt = spec.bytes_per_token_per_layer;
        let _use = self.staging.touch(run.load_bytes);
        let mut buf = run.load_buf.lock();
        let mut io = Duration::ZERO;
        for (qi, q) in run.meta.queries.iter().enumerate() {
            if q.load.is_empty() {
                continue;
            }
            let mut off = run.load_off[qi];
            let bad = run.bad.lock()[qi];
            for (ci, pc) in q.load.iter().enumerate() {
                if bad.is_some_and(|b| ci >= b) {
                    break;
                }
                let n = self.layer_len(pc.chunk_tokens);
                let dst = &mut buf[off..off + n];
                off += n;
                let res = self
                    .storage
                    .read_layer(&pc.desc.key, layer, &self.config.load_prefer, dst)
                    .map_err(|_| ())
                    .and_then(|tier| {
                        io += self.speed(&tier).delay(n);
                        let span = pc.desc.span;
                        self.pages
                            .write_tokens(&q.pages, layer, span.start, &dst[..span.len() * bpt])
                            .map_err(|_| ())
                    });
                if res.is_err() {
                    run.bad.lock()[qi] = Some(ci);
                    run.faults.lock().push(LoadFault {
                        query: q.query_id,
                        key: pc.desc.key.clone(),
                        safe_prefix: pc.desc.span.start,
                    });
                    self.stats.lock().missing_chunks += 1;
                    break;
                }
            }
            self.log.record(
                EventKind::LoadDone,
                Some(run.meta.id),
                Some(q.query_id),
                Some(layer),
            );
        }
        io
    }

    /// Loads every layer of every query with a load plan, chunk by chunk.
    fn load_all(&self, run: &Run) -> Duration {
        let spec = self.storage.spec();
        let bpt = spec.bytes_per_token_per_layer;
        let mut io = Duration::ZERO;
        for (qi, q) in run.meta.queries.iter().enumerate() {
            for (ci, pc) in q.load.iter().enumerate() {
                let tier = self.holding_tier(&pc.desc.key);
                let got = self.storage.get(&pc.desc.key, &self.config.load_prefer);
                let ok = got.ok().and_then(|chunk| {
                    io += tier
                        .map(|t| self.speed(&t).delay(chunk.len()))
                        .unwrap_or_default();
                    let span = pc.desc.span;
                    (0..spec.num_layers).try_for_each(|l| {
                        self.pages
                            .write_tokens(
                                &q.pages,
                                l,
                                span.start,
                                &chunk.layer(l)[..span.len() * bpt],
                            )
                            .ok()
                    })
                });
                if ok.is_none() {
                    run.bad.lock()[qi] = Some(ci);
                    run.faults.lock().push(LoadFault {
                        query: q.query_id,
                        key: pc.desc.key.clone(),
                        safe_prefix: pc.desc.span.start,
                    });
                    self.stats.lock().missing_chunks += 1;
                    break;
                }
                self.stats.lock().loaded_chunks += 1;
            }
            if !q.load.is_empty() {
                for l in 0..spec.num_layers {
                    self.log.record(
                        EventKind::LoadDone,
                        Some(run.meta.id),
                        Some(q.query_id),
                        Some(l),
                    );
                }
            }
        }
        io
    }

    /// Copies one layer of every store-plan chunk out of the pages. On the
    /// last layer the chunks are sealed and written. Returns modeled I/O.
    fn store_layer(&self, run: &Run, layer: usize, staged: bool) -> Duration {
        let spec = self.storage.spec();
        let last = layer + 1 == spec.num_layers;
        self.log
            .record(EventKind::StoreBegin, Some(run.meta.id), None, Some(layer));
        {
            let _use = staged.then(|| self.staging.touch(run.store_bytes));
            let mut buf = run.store_buf.lock();
            let mut asm = run.assembly.lock();
            if asm.is_empty() {
                *asm = run
                    .meta
                    .queries
                    .iter()
                    .map(|q| {
                        q.store
                            .iter()
                            .map(|c| vec![0u8; spec.chunk_bytes(c.chunk_tokens)])
                            .collect()
                    })
                    .collect();
            }
            for (qi, q) in run.meta.queries.iter().enumerate() {
                let mut off = run.store_off[qi];
                for (ci, pc) in q.store.iter().enumerate() {
                    let n = self.layer_len(pc.chunk_tokens);
                    let dst = if staged {
                        let d = &mut buf[off..off + n];
                        off += n;
                        d
                    } else {
                        &mut asm[qi][ci][layer * n..(layer + 1) * n]
                    };
                    if let Err(e) = self
                        .pages
                        .read_tokens(&q.pages, layer, pc.desc.span.start, dst)
                    {
                        tracing::warn!(query = q.query_id, error = %e, "store gather failed");
                        continue;
                    }
                    if staged {
                        let src = &buf[off - n..off];
                        asm[qi][ci][layer * n..(layer + 1) * n].copy_from_slice(src);
                    }
                }
            }
        }
        let mut io = Duration::ZERO;
        if last {
            io = self.put_assembled(run);
        }
        self.log
            .record(EventKind::StoreDone, Some(run.meta.id), None, Some(layer));
        io
    }

    fn put_assembled(&self, run: &Run) -> Duration {
        let spec = self.storage.spec();
        let asm = std::mem::take(&mut *run.assembly.lock());
        let mut handles = Vec::new();
        let mut io = Duration::ZERO;
        for (q, bufs) in run.meta.queries.iter().zip(asm) {
            for (pc, data) in q.store.iter().zip(bufs) {
                let chunk = match KVChunk::seal(pc.desc.key.clone(), spec, pc.chunk_tokens, data) {
                    Ok(c) => c,
                    Err(e) => {
                        tracing::warn!(error = %e, "sealing store chunk failed");
                        self.stats.lock().failed += 1;
                        continue;
                    }
                };
                io += self
                    .store_tiers
                    .iter()
                    .map(|t| self.speed(t).delay(chunk.len()))
                    .max()
                    .unwrap_or_default();
                handles.push(self.storage.put(chunk, &self.store_tiers, false));
            }
        }
        for h in handles {
            let rep = h.wait();
            let mut st = self.stats.lock();
            if !rep.all_ok() {
                // TierFull and friends: reported, never raised
                st.failed += 1;
            } else if rep
                .outcomes
                .iter()
                .all(|(_, o)| *o == TierOutcome::AlreadyPresent)
            {
                st.present += 1;
            } else {
                st.stored += 1;
            }
        }
        io
    }
}

/// Storage-backed connector.
pub struct Connector {
    shared: Arc<Shared>,
    sched: Mutex<HashMap<QueryId, SchedState>>,
    runs: Mutex<HashMap<u64, Arc<Run>>>,
    next_batch: AtomicU64,
    loader: WorkerPool,
    storer: WorkerPool,
}

impl Connector {
    pub fn new(
        storage: StorageEngine,
        pages: Arc<PagedKVStore>,
        config: ConnectorConfig,
        clock: Arc<Clock>,
        log: Arc<EventLog>,
    ) -> Self {
        let store_tiers = if config.store_tiers.is_empty() {
            storage.tier_ids().into_iter().take(1).collect()
        } else {
            config.store_tiers.clone()
        };
        let staging = StagingPool::new(config.staging_bytes);
        Self {
            shared: Arc::new(Shared {
                storage,
                pages,
                config,
                store_tiers,
                clock,
                log,
                staging,
                stats: Mutex::new(StoreStats::default()),
                prefetched: Mutex::new(HashMap::new()),
            }),
            sched: Mutex::new(HashMap::new()),
            runs: Mutex::new(HashMap::new()),
            next_batch: AtomicU64::new(0),
            // one thread each: a single in-flight layer per direction
            loader: WorkerPool::new("kv-load", 1),
            storer: WorkerPool::new("kv-store", 1),
        }
    }

    pub fn storage(&self) -> &StorageEngine {
        &self.shared.storage
    }

    pub fn config(&self) -> &ConnectorConfig {
        &self.shared.config
    }

    pub fn staging(&self) -> &StagingPool {
        &self.shared.staging
    }

    pub fn stats(&self) -> StoreStats {
        *self.shared.stats.lock()
    }

    /// Pages marked as filled from the backend for `query`.
    pub fn external_pages(&self, query: QueryId) -> Option<usize> {
        self.sched.lock().get(&query).map(|s| s.external)
    }

    /// Batches whose transfers have not been waited out.
    pub fn active_batches(&self) -> usize {
        self.runs.lock().len()
    }

    fn run(&self, meta: &BatchMetadata) -> Option<Arc<Run>> {
        self.runs.lock().get(&meta.id).cloned()
    }

    fn finish(&self, meta: &BatchMetadata) {
        if let Some(run) = self.runs.lock().remove(&meta.id) {
            self.shared.staging.unreserve(run.reserved);
        }
    }

    fn take_faults(run: &Run) -> Result<(), ConnectorError> {
        let f = std::mem::take(&mut *run.faults.lock());
        if f.is_empty() {
            Ok(())
        } else {
            Err(ConnectorError::ChunkMissing(f))
        }
    }

    fn issue_load(&self, run: &Arc<Run>, layer: usize) {
        let ticket = Ticket::new();
        run.loads.lock()[layer] = Some(ticket.clone());
        let sh = self.shared.clone();
        if sh.clock.is_virtual() {
            let io = sh.load_layer(run, layer);
            ticket.complete(sh.clock.io(Lane::Load, io).max(run.ready_at));
        } else {
            let run = run.clone();
            self.loader.submit(move || {
                sh.load_layer(&run, layer);
                ticket.complete(Duration::ZERO);
            });
        }
    }

    fn wait_ticket(&self, t: Option<Ticket>) {
        if let Some(t) = t {
            let end = t.wait();
            if self.shared.clock.is_virtual() {
                self.shared.clock.wait_until(end);
            }
        }
    }

    fn plan(&self, q: QueryId, s: SchedState) -> ConnectorMetadata {
        let sh = &self.shared;
        let spec = sh.storage.spec();
        let cs = sh.storage.chunk_size();
        let pt = spec.page_tokens;
        let n = s.tokens.len();
        let pages_of = |span: ChunkSpan| s.pages[span.start / pt..span.end.div_ceil(pt)].to_vec();
        let layers = 0..=spec.num_layers - 1;
        let mut load = Vec::new();
        let mut store = Vec::new();
        for (i, key) in s.keys.iter().enumerate() {
            let start = i * cs;
            let full = ChunkSpan {
                start,
                end: (start + cs).min(n),
            };
            if start < s.matched {
                let span = ChunkSpan {
                    start,
                    end: full.end.min(s.matched),
                };
                let tier = sh.holding_tier(key).unwrap_or(TierId::RamPool);
                load.push(PlannedChunk {
                    desc: ChunkDescriptor {
                        key: key.clone(),
                        span,
                        layers: layers.clone(),
                        location: ChunkLocation::Tier { tier, offset: 0 },
                    },
                    chunk_tokens: full.len(),
                    pages: pages_of(span),
                });
            } else if sh.config.store && !sh.storage.contains_any(key) {
                store.push(PlannedChunk {
                    desc: ChunkDescriptor {
                        key: key.clone(),
                        span: full,
                        layers: layers.clone(),
                        location: ChunkLocation::Tier {
                            tier: sh.store_tiers[0].clone(),
                            offset: 0,
                        },
                    },
                    chunk_tokens: full.len(),
                    pages: pages_of(full),
                });
            }
        }
        ConnectorMetadata {
            query_id: q,
            matched_tokens: s.matched,
            total_tokens: n,
            pages: s.pages,
            load,
            store,
            mode: sh.config.mode,
        }
    }
}

impl KvConnector for Connector {
    fn get_num_new_matched_tokens(&self, query: QueryId, tokens: &[TokenId]) -> usize {
        let sh = &self.shared;
        sh.log
            .record(EventKind::GetMatched, None, Some(query), None);
        let cs = sh.storage.chunk_size();
        let keys = chunk_keys(tokens, cs, &sh.storage.spec().model_tag);
        if sh.storage.tier_ids().iter().any(TierId::is_remote) {
            sh.storage.discover(&keys);
        }
        let hit = matched_prefix(&keys, tokens.len(), cs, &|k: &ChunkKey| {
            sh.storage.contains_any(k)
        });
        let matched = hit.min(tokens.len().saturating_sub(1));
        self.sched.lock().insert(
            query,
            SchedState {
                tokens: tokens.into(),
                keys,
                matched,
                pages: Vec::new(),
                external: 0,
            },
        );
        matched
    }

    fn update_state_after_alloc(
        &self,
        query: QueryId,
        blocks: &[PageId],
        num_external_blocks: usize,
    ) -> Result<(), ConnectorError> {
        let sh = &self.shared;
        sh.log
            .record(EventKind::UpdateAlloc, None, Some(query), None);
        let mut sched = self.sched.lock();
        let s = sched
            .get_mut(&query)
            .ok_or(ConnectorError::UnknownQuery(query))?;
        let needed = sh.storage.spec().pages_for(s.matched);
        let total = sh.storage.spec().pages_for(s.tokens.len());
        if blocks.len() < total.max(needed)
            || num_external_blocks < needed
            || num_external_blocks > blocks.len()
        {
            return Err(ConnectorError::InconsistentAlloc {
                query,
                blocks: blocks.len(),
                external: num_external_blocks,
                needed,
            });
        }
        s.pages = blocks.to_vec();
        s.external = needed;
        Ok(())
    }

    fn build_connector_meta(
        &self,
        output: &SchedulerOutput,
    ) -> Result<BatchMetadata, ConnectorError> {
        let sh = &self.shared;
        let id = self.next_batch.fetch_add(1, Ordering::Relaxed);
        sh.log.record(EventKind::BuildMeta, Some(id), None, None);
        let states: Vec<(QueryId, SchedState)> = {
            let mut sched = self.sched.lock();
            let mut v = Vec::new();
            for &q in &output.queries {
                match sched.remove(&q) {
                    Some(s) => v.push((q, s)),
                    None => {
                        // put back what was taken so the batch can be retried
                        for (q, s) in v {
                            sched.insert(q, s);
                        }
                        return Err(ConnectorError::UnknownQuery(q));
                    }
                }
            }
            v
        };
        let mut queries: Vec<ConnectorMetadata> =
            states.into_iter().map(|(q, s)| self.plan(q, s)).collect();

        let mut load_off = Vec::new();
        let mut store_off = Vec::new();
        let (mut lb, mut sb) = (0, 0);
        for q in &queries {
            load_off.push(lb);
            store_off.push(sb);
            lb += q
                .load
                .iter()
                .map(|c| sh.layer_len(c.chunk_tokens))
                .sum::<usize>();
            sb += q
                .store
                .iter()
                .map(|c| sh.layer_len(c.chunk_tokens))
                .sum::<usize>();
        }
        let mut mode = sh.config.mode;
        let mut reserved = 0;
        if mode == TransferMode::Layerwise && lb + sb > 0 {
            if sh.staging.reserve(lb + sb) {
                reserved = lb + sb;
            } else {
                mode = TransferMode::Blocking;
                sh.log.record(EventKind::Degraded, Some(id), None, None);
            }
        }
        for q in &mut queries {
            q.mode = mode;
        }
        let meta = BatchMetadata { id, mode, queries };
        let keys: Vec<ChunkKey> = meta
            .queries
            .iter()
            .flat_map(|q| q.load.iter().map(|c| c.desc.key.clone()))
            .collect();
        let ready_at = {
            let mut pf = sh.prefetched.lock();
            keys.iter()
                .filter_map(|k| pf.remove(k))
                .max()
                .unwrap_or_default()
        };
        let layers = sh.storage.spec().num_layers;
        let staged = mode == TransferMode::Layerwise;
        let run = Run {
            load_off,
            store_off,
            load_buf: Mutex::new(if staged { vec![0u8; lb] } else { Vec::new() }),
            store_buf: Mutex::new(if staged { vec![0u8; sb] } else { Vec::new() }),
            load_bytes: lb,
            store_bytes: sb,
            reserved,
            loads: Mutex::new(vec![None; layers]),
            stores: Mutex::new(vec![None; layers]),
            next_store: AtomicUsize::new(0),
            bad: Mutex::new(vec![None; meta.queries.len()]),
            faults: Mutex::new(Vec::new()),
            assembly: Mutex::new(Vec::new()),
            ready_at,
            _lease: sh.storage.lease(&keys),
            meta: meta.clone(),
        };
        self.runs.lock().insert(id, Arc::new(run));
        Ok(meta)
    }

    fn start_load_kv(&self, meta: &BatchMetadata) -> Result<(), ConnectorError> {
        let sh = &self.shared;
        sh.log
            .record(EventKind::StartLoad, Some(meta.id), None, None);
        let Some(run) = self.run(meta) else {
            return Ok(());
        };
        if meta.queries.iter().all(|q| q.load.is_empty()) {
            return Ok(());
        }
        match meta.mode {
            TransferMode::Layerwise => {
                self.issue_load(&run, 0);
                Ok(())
            }
            TransferMode::Blocking => {
                let io = sh.load_all(&run);
                if sh.clock.is_virtual() {
                    let end = sh.clock.io(Lane::Load, io);
                    sh.clock.wait_until(end.max(run.ready_at));
                }
                Self::take_faults(&run)
            }
        }
    }

    fn wait_load_kv(&self, meta: &BatchMetadata, layer: usize) -> Result<(), ConnectorError> {
        let sh = &self.shared;
        sh.log
            .record(EventKind::WaitLoad, Some(meta.id), None, Some(layer));
        if meta.mode == TransferMode::Blocking {
            return Ok(());
        }
        let Some(run) = self.run(meta) else {
            return Ok(());
        };
        let t = run.loads.lock().get(layer).cloned().flatten();
        let Some(t) = t else { return Ok(()) };
        self.wait_ticket(Some(t));
        let layers = sh.storage.spec().num_layers;
        if layer + 1 < layers && run.loads.lock()[layer + 1].is_none() {
            self.issue_load(&run, layer + 1);
        }
        if layer + 1 == layers {
            let mut st = sh.stats.lock();
            let bad = run.bad.lock();
            for (q, b) in meta.queries.iter().zip(bad.iter()) {
                st.loaded_chunks += b.unwrap_or(q.load.len()) as u64;
            }
        }
        Self::take_faults(&run)
    }

    fn start_store_kv(&self, meta: &BatchMetadata) -> Result<(), ConnectorError> {
        let sh = &self.shared;
        let layers = sh.storage.spec().num_layers;
        let Some(run) = self.run(meta) else {
            sh.log
                .record(EventKind::StartStore, Some(meta.id), None, None);
            return Ok(());
        };
        if meta.mode == TransferMode::Blocking {
            sh.log
                .record(EventKind::StartStore, Some(meta.id), None, None);
            if meta.queries.iter().any(|q| !q.store.is_empty()) {
                let mut io = Duration::ZERO;
                for l in 0..layers {
                    io += sh.store_layer(&run, l, false);
                }
                if sh.clock.is_virtual() {
                    let end = sh.clock.io(Lane::Store, io);
                    sh.clock.wait_until(end);
                }
            }
            self.finish(meta);
            return Ok(());
        }
        let layer = run.next_store.fetch_add(1, Ordering::AcqRel);
        sh.log
            .record(EventKind::StartStore, Some(meta.id), None, Some(layer));
        if layer >= layers || meta.queries.iter().all(|q| q.store.is_empty()) {
            return Ok(());
        }
        let ticket = Ticket::new();
        run.stores.lock()[layer] = Some(ticket.clone());
        let sh = sh.clone();
        if sh.clock.is_virtual() {
            let io = sh.store_layer(&run, layer, true);
            ticket.complete(sh.clock.io(Lane::Store, io));
        } else {
            self.storer.submit(move || {
                sh.store_layer(&run, layer, true);
                ticket.complete(Duration::ZERO);
            });
        }
        Ok(())
    }

    fn wait_store_kv(&self, meta: &BatchMetadata, layer: usize) -> Result<(), ConnectorError> {
        let sh = &self.shared;
        sh.log
            .record(EventKind::WaitStore, Some(meta.id), None, Some(layer));
        let Some(run) = self.run(meta) else {
            return Ok(());
        };
        let t = run.stores.lock().get(layer).cloned().flatten();
        self.wait_ticket(t);
        if layer + 1 == sh.storage.spec().num_layers {
            // the loads are long done by now; make sure before freeing
            let loads: Vec<Ticket> = run.loads.lock().iter().flatten().cloned().collect();
            for t in loads {
                t.wait();
            }
            self.finish(meta);
        }
        Ok(())
    }

    fn prefetch(&self, query: QueryId, tokens: &[TokenId]) {
        let sh = &self.shared;
        if !sh.config.prefetch {
            return;
        }
        sh.log.record(EventKind::Prefetch, None, Some(query), None);
        let keys = chunk_keys(
            tokens,
            sh.storage.chunk_size(),
            &sh.storage.spec().model_tag,
        );
        if sh.storage.tier_ids().iter().any(TierId::is_remote) {
            sh.storage.discover(&keys);
        }
        let target = &sh.config.prefetch_tier;
        for k in &keys {
            let held = sh.storage.contains(k);
            if held.is_empty() {
                break;
            }
            if held.contains(target) {
                continue;
            }
            let done = sh.storage.promote(k, target);
            if sh.clock.is_virtual() {
                // applied now, charged on its own lane
                if done.wait().is_ok() {
                    let src = held.iter().next().expect("held is non-empty");
                    let len = sh
                        .storage
                        .spec()
                        .chunk_bytes(sh.storage.entry(k).map_or(0, |e| e.token_count));
                    let end = sh.clock.io(
                        Lane::Prefetch,
                        sh.speed(src).delay(len) + sh.speed(target).delay(len),
                    );
                    sh.prefetched.lock().insert(k.clone(), end);
                }
            }
        }
    }

    fn begin_decode(&self, query: QueryId, history: &[TokenId], pages: &[PageId]) {
        let sh = &self.shared;
        if !sh.config.save_decode || !sh.config.store {
            return;
        }
        let cs = sh.storage.chunk_size();
        let start = history.len() / cs * cs;
        let n = history.len() - start;
        let tail: Result<Vec<Vec<u8>>, KvError> = (0..sh.storage.spec().num_layers)
            .map(|l| {
                let mut v = vec![0u8; sh.layer_len(n)];
                sh.pages.read_tokens(pages, l, start, &mut v).map(|_| v)
            })
            .collect();
        let res = tail.map_err(|e| e.to_string()).and_then(|t| {
            sh.storage
                .begin_decode(query, history, t, sh.store_tiers.clone())
                .map_err(|e| e.to_string())
        });
        if let Err(e) = res {
            tracing::warn!(query, error = %e, "decode storing disabled for query");
        }
    }

    fn save_decode_token(&self, query: QueryId, token: TokenId, pos: usize, pages: &[PageId]) {
        let sh = &self.shared;
        if sh.storage.decode_pending_tokens(query).is_none() {
            return;
        }
        let kv: Result<Vec<Vec<u8>>, KvError> = (0..sh.storage.spec().num_layers)
            .map(|l| {
                let mut v = vec![0u8; sh.layer_len(1)];
                sh.pages.read_tokens(pages, l, pos, &mut v).map(|_| v)
            })
            .collect();
        let res = kv.map_err(|e| e.to_string()).and_then(|kv| {
            let refs: Vec<&[u8]> = kv.iter().map(Vec::as_slice).collect();
            sh.storage
                .decode_append(query, token, &refs)
                .map_err(|e| e.to_string())
        });
        match res {
            Ok(Some(_)) => sh.settle(),
            Ok(None) => {}
            Err(e) => {
                tracing::warn!(query, error = %e, "decode append failed");
                let _ = sh.storage.finish_decode(query);
                sh.settle();
            }
        }
    }

    fn finish_decode(&self, query: QueryId) {
        if let Ok(Some(_)) = self.shared.storage.finish_decode(query) {
            self.shared.settle();
        }
    }

    fn request_finished(&self, query: QueryId) {
        self.sched.lock().remove(&query);
    }
}

impl Drop for Connector {
    fn drop(&mut self) {
        self.loader.wait_idle();
        self.storer.wait_idle();
    }
}
