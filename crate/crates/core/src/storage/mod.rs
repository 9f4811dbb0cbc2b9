//! Hierarchical chunk store.
//!
//! The [`StorageEngine`] keeps one index over every configured tier. Each
//! chunk entry records where it lives, per-tier pin flags, a share count that
//! blocks eviction while readers hold it, and an LRU clock. Tier I/O runs on
//! a bounded worker pool; puts return a [`PutHandle`] that any thread may
//! wait on.

mod accumulator;
pub mod disk;
pub mod file;
pub mod ram;
pub mod shared;
pub mod tier;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use bytes::Bytes;
use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub use accumulator::DecodeAccumulator;
pub use shared::{BufferPool, PoolOccupancy, SharedBuffer};
pub use tier::{ChunkMeta, Probe, StoredBlob, TierBackend, TierError, TierId, TierSpeed};

use crate::codec::Codec;
use crate::completion::Completion;
use crate::kv::{KVChunk, KvError, ModelSpec, QueryId};
use crate::pool::WorkerPool;
use crate::token::{ChunkKey, Digest, TokenId, DEFAULT_CHUNK_SIZE};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum StorageError {
    #[error("chunk not found")]
    NotFound,
    #[error("chunk failed checksum verification on every tier holding it")]
    CorruptChunk,
    #[error("tier {0} is full and nothing is evictable")]
    TierFull(TierId),
    #[error("tier {0} is not configured")]
    UnknownTier(TierId),
    #[error("unknown codec {0:?}")]
    UnknownCodec(String),
    #[error("entry is pinned on {0}")]
    Pinned(TierId),
    #[error("entry is in use")]
    Busy,
    #[error("tier {0}: {1}")]
    Tier(TierId, TierError),
    #[error(transparent)]
    Shape(#[from] KvError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Engine configuration. Sizes in bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StorageConfig {
    pub chunk_size: usize,
    pub ram_pool_bytes: u64,
    pub disk_path: Option<PathBuf>,
    pub disk_quota_bytes: u64,
    pub io_threads: usize,
    /// Evicting from RAM writes the chunk to disk instead of discarding it.
    pub demote_on_evict: bool,
    /// Simulated device speeds, keyed by tier name (`ram`, `disk`, `remote:<name>`).
    pub speeds: BTreeMap<String, TierSpeed>,
}

impl Default for StorageConfig {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            ram_pool_bytes: 256 << 20,
            disk_path: None,
            disk_quota_bytes: 1 << 30,
            io_threads: 4,
            demote_on_evict: false,
            speeds: BTreeMap::new(),
        }
    }
}

impl StorageConfig {
    pub fn speed_of(&self, tier: &TierId) -> TierSpeed {
        self.speeds
            .get(&tier.to_string())
            .copied()
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Stored,
    Evicted,
}

/// Store/evict notification, in per-key order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreEvent {
    pub kind: EventKind,
    pub key: ChunkKey,
    pub tier: TierId,
    pub token_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemovalCause {
    Evicted,
    Cleared,
    Corrupt,
    /// Forced removal through [`StorageEngine::drop_unchecked`].
    Lost,
}

/// Audit record of a removal, with the entry state at that instant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemovalRecord {
    pub key: ChunkKey,
    pub tier: TierId,
    pub cause: RemovalCause,
    pub pinned: bool,
    pub share_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TierOutcome {
    Stored,
    /// Key was already present (or being written) on this tier.
    AlreadyPresent,
    Failed(StorageError),
}

impl TierOutcome {
    pub fn is_ok(&self) -> bool {
        !matches!(self, TierOutcome::Failed(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PutReport {
    pub key: ChunkKey,
    pub outcomes: Vec<(TierId, TierOutcome)>,
}

impl PutReport {
    pub fn all_ok(&self) -> bool {
        self.outcomes.iter().all(|(_, o)| o.is_ok())
    }

    pub fn outcome(&self, tier: &TierId) -> Option<&TierOutcome> {
        self.outcomes
            .iter()
            .find(|(t, _)| t == tier)
            .map(|(_, o)| o)
    }
}

pub type PutHandle = Completion<PutReport>;
pub type GetHandle = Completion<Result<KVChunk, StorageError>>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClearReport {
    pub removed: usize,
    pub refused_pinned: usize,
    pub refused_busy: usize,
    pub absent: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierStats {
    pub bytes_written: u64,
    pub bytes_read: u64,
    pub used: u64,
    pub capacity: Option<u64>,
    pub entries: usize,
}

/// Snapshot of one indexed chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryInfo {
    pub key: ChunkKey,
    pub token_count: usize,
    pub tiers: BTreeSet<TierId>,
    pub pinned: BTreeSet<TierId>,
    pub codecs: BTreeMap<TierId, Codec>,
    pub share_count: u32,
}

#[derive(Debug, Clone)]
struct Slot {
    offset: u64,
    stored_len: usize,
    charged: u64,
    pinned: bool,
    codec: Codec,
}

struct Entry {
    meta: ChunkMeta,
    tiers: BTreeMap<TierId, Slot>,
    pending: BTreeSet<TierId>,
    share_count: u32,
    last_touch: u64,
}

impl Entry {
    fn new(meta: ChunkMeta) -> Self {
        Self {
            meta,
            tiers: BTreeMap::new(),
            pending: BTreeSet::new(),
            share_count: 0,
            last_touch: 0,
        }
    }

    fn is_dead(&self) -> bool {
        self.tiers.is_empty() && self.pending.is_empty()
    }
}

#[derive(Default)]
struct Index {
    entries: HashMap<Digest, Entry>,
    used: BTreeMap<TierId, u64>,
    clock: u64,
}

impl Index {
    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }
}

#[derive(Default)]
struct Counters {
    written: AtomicU64,
    read: AtomicU64,
}

struct TierHandle {
    backend: Arc<dyn TierBackend>,
    speed: TierSpeed,
    counters: Counters,
}

struct Core {
    spec: ModelSpec,
    config: StorageConfig,
    tiers: BTreeMap<TierId, TierHandle>,
    index: Mutex<Index>,
    buffers: BufferPool,
    subscribers: Mutex<Vec<Sender<StoreEvent>>>,
    audit: Mutex<Vec<RemovalRecord>>,
    pending_jobs: AtomicUsize,
}

struct Inner {
    core: Arc<Core>,
    pool: WorkerPool,
    decoders: Mutex<HashMap<QueryId, (DecodeAccumulator, Vec<TierId>)>>,
}

/// Cloneable handle to one chunk store.
#[derive(Clone)]
pub struct StorageEngine {
    inner: Arc<Inner>,
}

struct PutState {
    key: ChunkKey,
    remaining: AtomicUsize,
    outcomes: Mutex<Vec<(TierId, TierOutcome)>>,
    done: PutHandle,
}

impl PutState {
    fn record(&self, tier: TierId, outcome: TierOutcome) {
        let mut o = self.outcomes.lock();
        o.push((tier, outcome));
        if self.remaining.fetch_sub(1, Ordering::AcqRel) == 1 {
            let mut outcomes = std::mem::take(&mut *o);
            outcomes.sort_by(|a, b| a.0.cmp(&b.0));
            self.done.complete(PutReport {
                key: self.key.clone(),
                outcomes,
            });
        }
    }
}

struct WriteJob {
    tier: TierId,
    blob: StoredBlob,
    charged: u64,
    pin: bool,
}

impl StorageEngine {
    /// Builds an engine with RAM (if `ram_pool_bytes > 0`), disk (if
    /// `disk_path` is set) and any extra backends such as remote tiers.
    pub fn new(
        spec: ModelSpec,
        config: StorageConfig,
        extra: Vec<Arc<dyn TierBackend>>,
    ) -> Result<Self, StorageError> {
        spec.validate(config.chunk_size)?;
        let mut backends: Vec<Arc<dyn TierBackend>> = Vec::new();
        if config.ram_pool_bytes > 0 {
            let slot = spec.chunk_bytes(config.chunk_size);
            backends.push(Arc::new(ram::RamPool::new(config.ram_pool_bytes, slot)));
        }
        if let Some(path) = &config.disk_path {
            let disk = disk::DiskTier::new(path, config.disk_quota_bytes)
                .map_err(|e| StorageError::Tier(TierId::LocalDisk, e))?;
            backends.push(Arc::new(disk));
        }
        backends.extend(extra);
        let mut tiers = BTreeMap::new();
        for b in backends {
            let id = b.id();
            let handle = TierHandle {
                speed: config.speed_of(&id),
                backend: b,
                counters: Counters::default(),
            };
            if tiers.insert(id.clone(), handle).is_some() {
                return Err(StorageError::Config(format!("tier {id} configured twice")));
            }
        }
        if tiers.is_empty() {
            return Err(StorageError::Config("no tiers configured".into()));
        }
        let core = Arc::new(Core {
            spec,
            tiers,
            index: Mutex::new(Index::default()),
            buffers: BufferPool::new(),
            subscribers: Mutex::new(Vec::new()),
            audit: Mutex::new(Vec::new()),
            pending_jobs: AtomicUsize::new(0),
            config: config.clone(),
        });
        Ok(Self {
            inner: Arc::new(Inner {
                core,
                pool: WorkerPool::new("kv-io", config.io_threads),
                decoders: Mutex::new(HashMap::new()),
            }),
        })
    }

    /// RAM-only engine, handy for tests and engine-local caches.
    pub fn in_memory(
        spec: ModelSpec,
        chunk_size: usize,
        ram_pool_bytes: u64,
    ) -> Result<Self, StorageError> {
        Self::new(
            spec,
            StorageConfig {
                chunk_size,
                ram_pool_bytes,
                ..Default::default()
            },
            Vec::new(),
        )
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.inner.core.spec
    }

    pub fn config(&self) -> &StorageConfig {
        &self.inner.core.config
    }

    pub fn chunk_size(&self) -> usize {
        self.inner.core.config.chunk_size
    }

    pub fn tier_ids(&self) -> Vec<TierId> {
        self.inner.core.tiers.keys().cloned().collect()
    }

    pub fn has_tier(&self, tier: &TierId) -> bool {
        self.inner.core.tiers.contains_key(tier)
    }

    pub fn tier_speed(&self, tier: &TierId) -> TierSpeed {
        self.inner
            .core
            .tiers
            .get(tier)
            .map(|t| t.speed)
            .unwrap_or_default()
    }

    pub fn buffer_pool(&self) -> &BufferPool {
        &self.inner.core.buffers
    }

    /// Receives every store/evict event from now on.
    pub fn subscribe(&self) -> Receiver<StoreEvent> {
        let (tx, rx) = unbounded();
        self.inner.core.subscribers.lock().push(tx);
        rx
    }

    /// Writes `chunk` to each requested tier. Returns immediately; the handle
    /// resolves once every tier write has finished.
    pub fn put(&self, chunk: KVChunk, tiers: &[TierId], pin: bool) -> PutHandle {
        let core = &self.inner.core;
        match core.prepare_put(&chunk, tiers, pin) {
            Err(report) => Completion::ready(report),
            Ok((state, jobs, shared)) => {
                for job in jobs {
                    let core = core.clone();
                    let state = state.clone();
                    let shared = shared.clone();
                    core.pending_jobs.fetch_add(1, Ordering::AcqRel);
                    self.inner.pool.submit(move || {
                        core.run_write(job, &state, shared.as_ref());
                        core.pending_jobs.fetch_sub(1, Ordering::AcqRel);
                    });
                }
                state.done.clone()
            }
        }
    }

    /// Per-chunk puts submitted together; writes to different tiers overlap.
    pub fn batch_put(&self, items: Vec<(KVChunk, Vec<TierId>, bool)>) -> Vec<PutHandle> {
        items
            .into_iter()
            .map(|(c, tiers, pin)| self.put(c, &tiers, pin))
            .collect()
    }

    /// Reads from the first holding tier in `prefer` order (then speed order).
    pub fn get(&self, key: &ChunkKey, prefer: &[TierId]) -> Result<KVChunk, StorageError> {
        self.inner.core.get(key, prefer)
    }

    pub fn batch_get(&self, keys: &[ChunkKey], prefer: &[TierId]) -> Vec<GetHandle> {
        keys.iter()
            .map(|k| {
                let done: GetHandle = Completion::new();
                let core = self.inner.core.clone();
                let key = k.clone();
                let prefer = prefer.to_vec();
                let d = done.clone();
                self.inner
                    .pool
                    .submit(move || d.complete(core.get(&key, &prefer)));
                done
            })
            .collect()
    }

    /// Copies one layer of a stored chunk into `dst`, preferring tiers that
    /// can serve a partial read. Returns the tier that served it.
    pub fn read_layer(
        &self,
        key: &ChunkKey,
        layer: usize,
        prefer: &[TierId],
        dst: &mut [u8],
    ) -> Result<TierId, StorageError> {
        self.inner.core.read_layer(key, layer, prefer, dst)
    }

    pub fn contains(&self, key: &ChunkKey) -> BTreeSet<TierId> {
        self.inner
            .core
            .index
            .lock()
            .entries
            .get(&key.digest)
            .map(|e| e.tiers.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn contains_any(&self, key: &ChunkKey) -> bool {
        self.inner
            .core
            .index
            .lock()
            .entries
            .get(&key.digest)
            .is_some_and(|e| !e.tiers.is_empty())
    }

    /// Indexes chunks that other processes stored on shared (external) tiers.
    /// Returns how many new tier copies were found.
    pub fn discover(&self, keys: &[ChunkKey]) -> usize {
        let core = &self.inner.core;
        let mut found = 0;
        for (id, h) in &core.tiers {
            if !h.backend.external() {
                continue;
            }
            let unknown: Vec<ChunkKey> = {
                let idx = core.index.lock();
                keys.iter()
                    .filter(|k| {
                        idx.entries
                            .get(&k.digest)
                            .is_none_or(|e| !e.tiers.contains_key(id) && !e.pending.contains(id))
                    })
                    .cloned()
                    .collect()
            };
            if unknown.is_empty() {
                continue;
            }
            let probes = match h.backend.probe(&unknown) {
                Ok(p) => p,
                Err(err) => {
                    tracing::warn!(tier = %id, ?err, "probe failed");
                    continue;
                }
            };
            let mut idx = core.index.lock();
            let now = idx.tick();
            for (key, p) in unknown.into_iter().zip(probes) {
                let Some(p) = p else { continue };
                let meta = ChunkMeta {
                    key: key.clone(),
                    token_count: p.token_count,
                    num_layers: core.spec.num_layers,
                    bytes_per_token_per_layer: core.spec.bytes_per_token_per_layer,
                };
                let charged = h.backend.charge(p.stored_len);
                let e = idx
                    .entries
                    .entry(key.digest)
                    .or_insert_with(|| Entry::new(meta));
                if e.tiers.contains_key(id) || e.meta.token_count != p.token_count {
                    continue;
                }
                e.last_touch = now;
                e.tiers.insert(
                    id.clone(),
                    Slot {
                        offset: p.offset,
                        stored_len: p.stored_len,
                        charged,
                        pinned: false,
                        codec: p.codec,
                    },
                );
                let meta = e.meta.clone();
                *idx.used.entry(id.clone()).or_insert(0) += charged;
                core.emit(EventKind::Stored, &meta, id);
                found += 1;
            }
        }
        found
    }

    pub fn pin(&self, key: &ChunkKey, tier: &TierId, on: bool) -> Result<(), StorageError> {
        let mut idx = self.inner.core.index.lock();
        let slot = idx
            .entries
            .get_mut(&key.digest)
            .and_then(|e| e.tiers.get_mut(tier))
            .ok_or(StorageError::NotFound)?;
        slot.pinned = on;
        Ok(())
    }

    /// Removes `keys` from `tier`. Pinned or in-use entries are refused and
    /// counted.
    pub fn clear(&self, keys: &[ChunkKey], tier: &TierId) -> ClearReport {
        let core = &self.inner.core;
        let mut report = ClearReport::default();
        let mut idx = core.index.lock();
        for key in keys {
            let Some(e) = idx.entries.get(&key.digest) else {
                report.absent += 1;
                continue;
            };
            let Some(slot) = e.tiers.get(tier) else {
                report.absent += 1;
                continue;
            };
            if slot.pinned {
                report.refused_pinned += 1;
            } else if e.share_count > 0 {
                report.refused_busy += 1;
            } else {
                core.remove_slot(&mut idx, &key.digest, tier, RemovalCause::Cleared);
                report.removed += 1;
            }
        }
        report
    }

    /// Evicts least-recently-touched unpinned, unshared entries from `tier`
    /// until `bytes_needed` bytes are free. Returns the bytes freed.
    pub fn evict_until(&self, tier: &TierId, bytes_needed: u64) -> u64 {
        let core = &self.inner.core;
        let mut idx = core.index.lock();
        let (freed, demote) = core.evict_locked(&mut idx, tier, bytes_needed);
        drop(idx);
        self.demote(demote);
        freed
    }

    fn demote(&self, chunks: Vec<KVChunk>) {
        for c in chunks {
            // fire and forget; quiesce() waits for it
            let _ = self.put(c, &[TierId::LocalDisk], false);
        }
    }

    /// Re-encodes the copy on `tier` with `codec`. Returns the new stored size.
    pub fn compress_entry(
        &self,
        key: &ChunkKey,
        tier: &TierId,
        codec: &str,
    ) -> Result<usize, StorageError> {
        let codec =
            Codec::by_name(codec).map_err(|_| StorageError::UnknownCodec(codec.to_string()))?;
        self.inner.core.compress(key, tier, codec)
    }

    /// Copies `key` into `to` from whichever tier holds it. Runs on the
    /// worker pool.
    pub fn promote(&self, key: &ChunkKey, to: &TierId) -> Completion<Result<(), StorageError>> {
        let done = Completion::new();
        if self.contains(key).contains(to) {
            done.complete(Ok(()));
            return done;
        }
        let core = self.inner.core.clone();
        let key = key.clone();
        let to = to.clone();
        let d = done.clone();
        core.pending_jobs.fetch_add(1, Ordering::AcqRel);
        self.inner.pool.submit(move || {
            let r = core.get(&key, &[]).and_then(|chunk| {
                let report = core.put_inline(chunk, std::slice::from_ref(&to), false);
                match report.outcome(&to) {
                    Some(TierOutcome::Failed(e)) => Err(e.clone()),
                    _ => Ok(()),
                }
            });
            core.pending_jobs.fetch_sub(1, Ordering::AcqRel);
            d.complete(r);
        });
        done
    }

    /// Holds `keys` against eviction until the lease is dropped.
    pub fn lease(&self, keys: &[ChunkKey]) -> Lease {
        let core = self.inner.core.clone();
        let mut held = Vec::new();
        {
            let mut idx = core.index.lock();
            for k in keys {
                if let Some(e) = idx.entries.get_mut(&k.digest) {
                    e.share_count += 1;
                    held.push(k.digest);
                }
            }
        }
        Lease { core, held }
    }

    pub fn entry(&self, key: &ChunkKey) -> Option<EntryInfo> {
        self.inner
            .core
            .index
            .lock()
            .entries
            .get(&key.digest)
            .filter(|e| !e.tiers.is_empty())
            .map(entry_info)
    }

    /// Every indexed chunk with at least one committed tier.
    pub fn entries(&self) -> Vec<EntryInfo> {
        let idx = self.inner.core.index.lock();
        let mut v: Vec<EntryInfo> = idx
            .entries
            .values()
            .filter(|e| !e.tiers.is_empty())
            .map(entry_info)
            .collect();
        v.sort_by_key(|a| a.key.digest);
        v
    }

    pub fn len(&self) -> usize {
        self.inner
            .core
            .index
            .lock()
            .entries
            .values()
            .filter(|e| !e.tiers.is_empty())
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tier_stats(&self) -> BTreeMap<TierId, TierStats> {
        let core = &self.inner.core;
        let idx = core.index.lock();
        core.tiers
            .iter()
            .map(|(id, h)| {
                let entries = idx
                    .entries
                    .values()
                    .filter(|e| e.tiers.contains_key(id))
                    .count();
                (
                    id.clone(),
                    TierStats {
                        bytes_written: h.counters.written.load(Ordering::Relaxed),
                        bytes_read: h.counters.read.load(Ordering::Relaxed),
                        used: idx.used.get(id).copied().unwrap_or(0),
                        capacity: h.backend.capacity(),
                        entries,
                    },
                )
            })
            .collect()
    }

    /// Removal audit log since the last drain.
    pub fn drain_audit(&self) -> Vec<RemovalRecord> {
        std::mem::take(&mut *self.inner.core.audit.lock())
    }

    /// Sum of share counts over all entries (zero when no reader holds a lease).
    pub fn total_share_count(&self) -> u64 {
        self.inner
            .core
            .index
            .lock()
            .entries
            .values()
            .map(|e| e.share_count as u64)
            .sum()
    }

    /// Fault injection: drops `key` from every tier regardless of pins and
    /// leases, as if the device lost it.
    pub fn drop_unchecked(&self, key: &ChunkKey) {
        let core = &self.inner.core;
        let mut idx = core.index.lock();
        let tiers: Vec<TierId> = idx
            .entries
            .get(&key.digest)
            .map(|e| e.tiers.keys().cloned().collect())
            .unwrap_or_default();
        for t in tiers {
            core.remove_slot(&mut idx, &key.digest, &t, RemovalCause::Lost);
        }
    }

    /// Blocks until all background tier I/O has finished.
    pub fn quiesce(&self) {
        self.inner.pool.wait_idle();
    }

    pub fn in_flight(&self) -> usize {
        self.inner.core.pending_jobs.load(Ordering::Acquire)
    }

    /// Starts delayed decode storing for `query`. `history` is every token
    /// so far and `tail` the per-layer KV after the last chunk boundary.
    pub fn begin_decode(
        &self,
        query: QueryId,
        history: &[TokenId],
        tail: Vec<Vec<u8>>,
        tiers: Vec<TierId>,
    ) -> Result<(), StorageError> {
        let acc = DecodeAccumulator::new(query, self.spec(), self.chunk_size(), history, tail)?;
        self.inner.decoders.lock().insert(query, (acc, tiers));
        Ok(())
    }

    /// Appends one decoded token. A tier write happens only when this token
    /// completes a chunk; the flushed chunk's key is returned.
    pub fn decode_append(
        &self,
        query: QueryId,
        token: TokenId,
        layers: &[&[u8]],
    ) -> Result<Option<ChunkKey>, StorageError> {
        let mut decoders = self.inner.decoders.lock();
        let Some((acc, tiers)) = decoders.get_mut(&query) else {
            return Err(StorageError::NotFound);
        };
        let flushed = acc.append(token, layers)?;
        let tiers = tiers.clone();
        drop(decoders);
        Ok(flushed.map(|c| {
            let key = c.key().clone();
            let _ = self.put(c, &tiers, false);
            key
        }))
    }

    /// Flushes whatever the query has pending and forgets it.
    pub fn finish_decode(&self, query: QueryId) -> Result<Option<ChunkKey>, StorageError> {
        let Some((mut acc, tiers)) = self.inner.decoders.lock().remove(&query) else {
            return Ok(None);
        };
        Ok(acc.finish()?.map(|c| {
            let key = c.key().clone();
            let _ = self.put(c, &tiers, false);
            key
        }))
    }

    pub fn decode_pending_tokens(&self, query: QueryId) -> Option<usize> {
        self.inner
            .decoders
            .lock()
            .get(&query)
            .map(|(a, _)| a.pending_tokens())
    }
}

fn entry_info(e: &Entry) -> EntryInfo {
    EntryInfo {
        key: e.meta.key.clone(),
        token_count: e.meta.token_count,
        tiers: e.tiers.keys().cloned().collect(),
        pinned: e
            .tiers
            .iter()
            .filter(|(_, s)| s.pinned)
            .map(|(t, _)| t.clone())
            .collect(),
        codecs: e.tiers.iter().map(|(t, s)| (t.clone(), s.codec)).collect(),
        share_count: e.share_count,
    }
}

/// Eviction guard over a set of chunks.
pub struct Lease {
    core: Arc<Core>,
    held: Vec<Digest>,
}

impl Lease {
    pub fn len(&self) -> usize {
        self.held.len()
    }

    pub fn is_empty(&self) -> bool {
        self.held.is_empty()
    }
}

impl Drop for Lease {
    fn drop(&mut self) {
        let mut idx = self.core.index.lock();
        for d in &self.held {
            if let Some(e) = idx.entries.get_mut(d) {
                e.share_count = e.share_count.saturating_sub(1);
            }
        }
    }
}

fn chunk_meta(chunk: &KVChunk) -> ChunkMeta {
    ChunkMeta {
        key: chunk.key().clone(),
        token_count: chunk.token_count(),
        num_layers: chunk.num_layers(),
        bytes_per_token_per_layer: chunk.bytes_per_token_per_layer(),
    }
}

impl Core {
    fn emit(&self, kind: EventKind, meta: &ChunkMeta, tier: &TierId) {
        let ev = StoreEvent {
            kind,
            key: meta.key.clone(),
            tier: tier.clone(),
            token_count: meta.token_count,
        };
        self.subscribers
            .lock()
            .retain(|s| s.send(ev.clone()).is_ok());
    }

    fn check_shape(&self, chunk: &KVChunk) -> Result<(), StorageError> {
        let s = &self.spec;
        if chunk.num_layers() != s.num_layers
            || chunk.bytes_per_token_per_layer() != s.bytes_per_token_per_layer
            || chunk.token_count() > self.config.chunk_size
        {
            return Err(StorageError::Shape(KvError::SizeMismatch {
                expected: s.chunk_bytes(self.config.chunk_size),
                actual: chunk.len(),
            }));
        }
        Ok(())
    }

    /// Reserves space and registers pending writes. `Err` carries a report
    /// that is already final (nothing to write).
    #[allow(clippy::type_complexity)]
    fn prepare_put(
        &self,
        chunk: &KVChunk,
        tiers: &[TierId],
        pin: bool,
    ) -> Result<(Arc<PutState>, Vec<WriteJob>, Option<SharedBuffer>), PutReport> {
        let meta = chunk_meta(chunk);
        let mut outcomes = Vec::new();
        let mut jobs = Vec::new();
        let mut wanted: Vec<TierId> = tiers.to_vec();
        wanted.sort();
        wanted.dedup();

        if let Err(e) = self.check_shape(chunk) {
            return Err(PutReport {
                key: meta.key,
                outcomes: wanted
                    .into_iter()
                    .map(|t| (t, TierOutcome::Failed(e.clone())))
                    .collect(),
            });
        }

        let checksum = crate::checksum(chunk.payload());
        let mut demoted = Vec::new();
        {
            let mut idx = self.index.lock();
            let now = idx.tick();
            for tier in wanted {
                let Some(handle) = self.tiers.get(&tier) else {
                    outcomes.push((
                        tier.clone(),
                        TierOutcome::Failed(StorageError::UnknownTier(tier)),
                    ));
                    continue;
                };
                if let Some(e) = idx.entries.get_mut(&meta.key.digest) {
                    if let Some(slot) = e.tiers.get_mut(&tier) {
                        slot.pinned |= pin;
                        e.last_touch = now;
                        outcomes.push((tier, TierOutcome::AlreadyPresent));
                        continue;
                    }
                    if e.pending.contains(&tier) {
                        outcomes.push((tier, TierOutcome::AlreadyPresent));
                        continue;
                    }
                }
                let charged = handle.backend.charge(chunk.len());
                if let Some(cap) = handle.backend.capacity() {
                    let used = idx.used.get(&tier).copied().unwrap_or(0);
                    if used + charged > cap {
                        let need = used + charged - cap;
                        let (_, d) = self.evict_locked(&mut idx, &tier, need);
                        demoted.extend(d);
                        let used = idx.used.get(&tier).copied().unwrap_or(0);
                        if used + charged > cap {
                            outcomes.push((
                                tier.clone(),
                                TierOutcome::Failed(StorageError::TierFull(tier)),
                            ));
                            continue;
                        }
                    }
                }
                *idx.used.entry(tier.clone()).or_insert(0) += charged;
                let e = idx
                    .entries
                    .entry(meta.key.digest)
                    .or_insert_with(|| Entry::new(meta.clone()));
                e.pending.insert(tier.clone());
                e.last_touch = now;
                jobs.push(WriteJob {
                    tier,
                    blob: StoredBlob {
                        meta: meta.clone(),
                        codec: Codec::Identity,
                        data: chunk.payload().clone(),
                        checksum,
                    },
                    charged,
                    pin,
                });
            }
        }
        // Demotion victims are rare; writing them inline keeps ordering simple.
        for c in demoted {
            self.put_inline(c, &[TierId::LocalDisk], false);
        }

        if jobs.is_empty() {
            outcomes.sort_by(|a, b| a.0.cmp(&b.0));
            return Err(PutReport {
                key: meta.key,
                outcomes,
            });
        }
        let shared = self.buffers.share(chunk.payload().clone(), jobs.len());
        let state = Arc::new(PutState {
            key: meta.key.clone(),
            remaining: AtomicUsize::new(outcomes.len() + jobs.len()),
            outcomes: Mutex::new(Vec::new()),
            done: Completion::new(),
        });
        for (t, o) in outcomes {
            state.record(t, o);
        }
        Ok((state, jobs, Some(shared)))
    }

    fn run_write(&self, job: WriteJob, state: &PutState, shared: Option<&SharedBuffer>) {
        let handle = &self.tiers[&job.tier];
        handle.speed.throttle(job.blob.data.len());
        let res = handle.backend.write(&job.blob);
        if res.is_ok() {
            handle
                .counters
                .written
                .fetch_add(job.blob.data.len() as u64, Ordering::Relaxed);
        }
        let outcome = self.finish_write(&job, res);
        if let Some(s) = shared {
            s.release();
        }
        state.record(job.tier, outcome);
    }

    fn finish_write(&self, job: &WriteJob, res: Result<u64, TierError>) -> TierOutcome {
        let digest = job.blob.meta.key.digest;
        let mut idx = self.index.lock();
        match res {
            Ok(offset) => {
                let now = idx.tick();
                let e = idx
                    .entries
                    .entry(digest)
                    .or_insert_with(|| Entry::new(job.blob.meta.clone()));
                e.pending.remove(&job.tier);
                e.last_touch = now;
                e.tiers.insert(
                    job.tier.clone(),
                    Slot {
                        offset,
                        stored_len: job.blob.data.len(),
                        charged: job.charged,
                        pinned: job.pin,
                        codec: job.blob.codec,
                    },
                );
                self.emit(EventKind::Stored, &job.blob.meta, &job.tier);
                TierOutcome::Stored
            }
            Err(err) => {
                if let Some(u) = idx.used.get_mut(&job.tier) {
                    *u = u.saturating_sub(job.charged);
                }
                if let Some(e) = idx.entries.get_mut(&digest) {
                    e.pending.remove(&job.tier);
                    if e.is_dead() {
                        idx.entries.remove(&digest);
                    }
                }
                TierOutcome::Failed(match err {
                    TierError::Full => StorageError::TierFull(job.tier.clone()),
                    other => StorageError::Tier(job.tier.clone(), other),
                })
            }
        }
    }

    /// Synchronous put on the calling thread, used from inside pool jobs.
    fn put_inline(&self, chunk: KVChunk, tiers: &[TierId], pin: bool) -> PutReport {
        match self.prepare_put(&chunk, tiers, pin) {
            Err(report) => report,
            Ok((state, jobs, shared)) => {
                for job in jobs {
                    self.run_write(job, &state, shared.as_ref());
                }
                state.done.wait()
            }
        }
    }

    fn remove_slot(
        &self,
        idx: &mut Index,
        digest: &Digest,
        tier: &TierId,
        cause: RemovalCause,
    ) -> Option<(Slot, ChunkMeta)> {
        let e = idx.entries.get_mut(digest)?;
        let slot = e.tiers.remove(tier)?;
        let meta = e.meta.clone();
        self.audit.lock().push(RemovalRecord {
            key: meta.key.clone(),
            tier: tier.clone(),
            cause,
            pinned: slot.pinned,
            share_count: e.share_count,
        });
        if e.is_dead() {
            idx.entries.remove(digest);
        }
        if let Some(u) = idx.used.get_mut(tier) {
            *u = u.saturating_sub(slot.charged);
        }
        if let Some(h) = self.tiers.get(tier) {
            if let Err(err) = h.backend.remove(&meta, slot.offset) {
                tracing::warn!(%tier, ?err, "tier remove failed");
            }
        }
        self.emit(EventKind::Evicted, &meta, tier);
        Some((slot, meta))
    }

    /// LRU eviction under the index lock. Returns bytes freed and any chunks
    /// to demote to disk.
    fn evict_locked(
        &self,
        idx: &mut Index,
        tier: &TierId,
        bytes_needed: u64,
    ) -> (u64, Vec<KVChunk>) {
        let Some(handle) = self.tiers.get(tier) else {
            return (0, Vec::new());
        };
        let cap = handle.backend.capacity().unwrap_or(u64::MAX);
        let demote = self.config.demote_on_evict
            && *tier == TierId::RamPool
            && self.tiers.contains_key(&TierId::LocalDisk);
        let mut freed = 0;
        let mut demoted = Vec::new();
        loop {
            let used = idx.used.get(tier).copied().unwrap_or(0);
            if cap.saturating_sub(used) >= bytes_needed {
                break;
            }
            let victim = idx
                .entries
                .iter()
                .filter(|(_, e)| e.share_count == 0)
                .filter_map(|(d, e)| {
                    e.tiers
                        .get(tier)
                        .filter(|s| !s.pinned)
                        .map(|_| (e.last_touch, *d))
                })
                .min();
            let Some((_, digest)) = victim else {
                break;
            };
            if demote {
                let e = &idx.entries[&digest];
                let on_disk = e.tiers.contains_key(&TierId::LocalDisk)
                    || e.pending.contains(&TierId::LocalDisk);
                if !on_disk {
                    let slot = &e.tiers[tier];
                    if let Ok(blob) = handle.backend.read(&e.meta, slot.offset) {
                        if let Ok(c) = decode_blob(&blob) {
                            demoted.push(c);
                        }
                    }
                }
            }
            if let Some((slot, _)) = self.remove_slot(idx, &digest, tier, RemovalCause::Evicted) {
                freed += slot.charged;
            }
        }
        (freed, demoted)
    }

    fn ordered_tiers(e: &Entry, prefer: &[TierId]) -> Vec<(TierId, Slot)> {
        let mut v: Vec<(TierId, Slot)> = e
            .tiers
            .iter()
            .map(|(t, s)| (t.clone(), s.clone()))
            .collect();
        v.sort_by_key(|(t, _)| {
            (
                prefer.iter().position(|p| p == t).unwrap_or(usize::MAX),
                t.clone(),
            )
        });
        v
    }

    fn get(&self, key: &ChunkKey, prefer: &[TierId]) -> Result<KVChunk, StorageError> {
        let (meta, order) = {
            let mut idx = self.index.lock();
            let now = idx.tick();
            let e = idx
                .entries
                .get_mut(&key.digest)
                .filter(|e| !e.tiers.is_empty())
                .ok_or(StorageError::NotFound)?;
            e.share_count += 1;
            e.last_touch = now;
            (e.meta.clone(), Self::ordered_tiers(e, prefer))
        };
        let _guard = ShareGuard {
            core: self,
            digest: key.digest,
        };
        let mut saw_corrupt = false;
        for (tier, slot) in order {
            let handle = &self.tiers[&tier];
            handle.speed.throttle(slot.stored_len);
            let result = handle.backend.read(&meta, slot.offset).and_then(|blob| {
                if !handle.backend.trusted() && !blob.verify() {
                    return Err(TierError::Corrupt("checksum mismatch".into()));
                }
                decode_blob(&blob).map_err(|e| TierError::Corrupt(e.to_string()))
            });
            match result {
                Ok(chunk) => {
                    handle
                        .counters
                        .read
                        .fetch_add(slot.stored_len as u64, Ordering::Relaxed);
                    return Ok(chunk);
                }
                Err(TierError::Corrupt(why)) => {
                    tracing::warn!(%tier, %why, "dropping corrupt chunk copy");
                    saw_corrupt = true;
                    let mut idx = self.index.lock();
                    self.remove_slot(&mut idx, &key.digest, &tier, RemovalCause::Corrupt);
                }
                Err(TierError::NotFound) => {
                    let mut idx = self.index.lock();
                    self.remove_slot(&mut idx, &key.digest, &tier, RemovalCause::Lost);
                }
                Err(err) => tracing::warn!(%tier, ?err, "tier read failed"),
            }
        }
        Err(if saw_corrupt {
            StorageError::CorruptChunk
        } else {
            StorageError::NotFound
        })
    }

    fn read_layer(
        &self,
        key: &ChunkKey,
        layer: usize,
        prefer: &[TierId],
        dst: &mut [u8],
    ) -> Result<TierId, StorageError> {
        let (meta, order) = {
            let mut idx = self.index.lock();
            let now = idx.tick();
            let e = idx
                .entries
                .get_mut(&key.digest)
                .filter(|e| !e.tiers.is_empty())
                .ok_or(StorageError::NotFound)?;
            e.share_count += 1;
            e.last_touch = now;
            (e.meta.clone(), Self::ordered_tiers(e, prefer))
        };
        let _guard = ShareGuard {
            core: self,
            digest: key.digest,
        };
        let n = meta.layer_len();
        if layer >= meta.num_layers || dst.len() != n {
            return Err(StorageError::Shape(KvError::SizeMismatch {
                expected: n,
                actual: dst.len(),
            }));
        }
        for (tier, slot) in &order {
            if slot.codec != Codec::Identity || !self.tiers[tier].backend.trusted() {
                continue;
            }
            let handle = &self.tiers[tier];
            handle.speed.throttle(n);
            if handle
                .backend
                .read_range(&meta, slot.offset, layer * n..(layer + 1) * n, dst)
                .is_ok()
            {
                handle.counters.read.fetch_add(n as u64, Ordering::Relaxed);
                return Ok(tier.clone());
            }
        }
        let chunk = self.get(key, prefer)?;
        dst.copy_from_slice(chunk.layer(layer));
        let served = self
            .index
            .lock()
            .entries
            .get(&key.digest)
            .and_then(|e| {
                Self::ordered_tiers(e, prefer)
                    .first()
                    .map(|(t, _)| t.clone())
            })
            .unwrap_or_else(|| order[0].0.clone());
        Ok(served)
    }

    fn compress(&self, key: &ChunkKey, tier: &TierId, codec: Codec) -> Result<usize, StorageError> {
        let handle = self
            .tiers
            .get(tier)
            .ok_or_else(|| StorageError::UnknownTier(tier.clone()))?;
        let mut idx = self.index.lock();
        let e = idx
            .entries
            .get_mut(&key.digest)
            .ok_or(StorageError::NotFound)?;
        let slot = e.tiers.get(tier).cloned().ok_or(StorageError::NotFound)?;
        if e.share_count > 0 {
            return Err(StorageError::Busy);
        }
        let meta = e.meta.clone();
        let blob = handle
            .backend
            .read(&meta, slot.offset)
            .map_err(|err| StorageError::Tier(tier.clone(), err))?;
        let raw = decode_blob(&blob).map_err(|_| StorageError::CorruptChunk)?;
        let data = Bytes::from(codec.encode(raw.payload()));
        let new = StoredBlob {
            checksum: crate::checksum(&data),
            meta: meta.clone(),
            codec,
            data,
        };
        handle
            .backend
            .remove(&meta, slot.offset)
            .map_err(|err| StorageError::Tier(tier.clone(), err))?;
        let offset = handle
            .backend
            .write(&new)
            .map_err(|err| StorageError::Tier(tier.clone(), err))?;
        let charged = handle.backend.charge(new.data.len());
        let e = idx
            .entries
            .get_mut(&key.digest)
            .expect("entry held under lock");
        let s = e.tiers.get_mut(tier).expect("slot held under lock");
        let old_charge = s.charged;
        s.offset = offset;
        s.stored_len = new.data.len();
        s.charged = charged;
        s.codec = codec;
        let used = idx.used.entry(tier.clone()).or_insert(0);
        *used = used.saturating_sub(old_charge) + charged;
        Ok(new.data.len())
    }
}

struct ShareGuard<'a> {
    core: &'a Core,
    digest: Digest,
}

impl Drop for ShareGuard<'_> {
    fn drop(&mut self) {
        if let Some(e) = self.core.index.lock().entries.get_mut(&self.digest) {
            e.share_count = e.share_count.saturating_sub(1);
        }
    }
}

/// Decodes a stored blob back into a sealed chunk.
pub fn decode_blob(blob: &StoredBlob) -> Result<KVChunk, StorageError> {
    let m = &blob.meta;
    let data = if blob.codec == Codec::Identity {
        blob.data.clone()
    } else {
        Bytes::from(
            blob.codec
                .decode(&blob.data, m.raw_len())
                .map_err(|_| StorageError::CorruptChunk)?,
        )
    };
    Ok(KVChunk::with_shape(
        m.key.clone(),
        m.token_count,
        m.num_layers,
        m.bytes_per_token_per_layer,
        data,
    )?)
}
