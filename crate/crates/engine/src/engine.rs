//! Simulated paged-attention engine: FIFO scheduler plus a model runner
//! that drives a [`KvConnector`] through one forward pass per batch.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use kvtier_core::token::{chunk_keys, chunk_spans};
use kvtier_core::{KVChunk, KvError, ModelSpec, PageId, PagedKVStore, QueryId, TokenId};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::connector::{
    BatchMetadata, ConnectorError, KvConnector, LoadFault, SchedulerOutput, TransferMode,
};
use crate::cost::CostModel;
use crate::events::{EventKind, EventLog};
use crate::model::{extend_hashes, fill_tokens, output_tokens, prefix_hashes, KvDigest};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimQuery {
    pub id: QueryId,
    pub tokens: Vec<TokenId>,
    pub max_output: usize,
    pub arrival: Duration,
}

impl SimQuery {
    pub fn new(id: QueryId, tokens: Vec<TokenId>, max_output: usize, arrival: Duration) -> Self {
        Self {
            id,
            tokens,
            max_output,
            arrival,
        }
    }
}

/// Output tokens plus a fingerprint of every KV byte the model read.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOutput {
    pub tokens: Vec<TokenId>,
    pub kv_digest: u64,
}

/// Timing of one query; all instants are clock times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: QueryId,
    pub prompt_tokens: usize,
    pub arrival: Duration,
    pub scheduled: Duration,
    /// Compute of layer 0 began.
    pub first_layer: Duration,
    pub first_token: Duration,
    pub finish: Duration,
    /// Gaps between consecutive output tokens.
    pub itl: Vec<Duration>,
    /// Prefix reported by the connector.
    pub matched: usize,
    /// Prefix actually reused after load faults.
    pub reused: usize,
    pub mode: TransferMode,
    pub output: QueryOutput,
}

impl QueryRecord {
    pub fn ttft(&self) -> Duration {
        self.first_token.saturating_sub(self.arrival)
    }

    pub fn sched_to_first_layer(&self) -> Duration {
        self.first_layer.saturating_sub(self.scheduled)
    }

    pub fn mean_itl(&self) -> Option<Duration> {
        if self.itl.is_empty() {
            None
        } else {
            Some(self.itl.iter().sum::<Duration>() / self.itl.len() as u32)
        }
    }

    pub fn hit_ratio(&self) -> f64 {
        if self.prompt_tokens == 0 {
            0.0
        } else {
            self.reused as f64 / self.prompt_tokens as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub num_pages: usize,
    pub max_concurrent: usize,
    pub cost: CostModel,
    pub vocab: u32,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            num_pages: 4096,
            max_concurrent: 8,
            cost: CostModel::default(),
            vocab: 32_000,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("query {query} needs {needed} pages, the engine has {capacity}")]
    TooLarge {
        query: QueryId,
        needed: usize,
        capacity: usize,
    },
    #[error("query {0} has an empty prompt")]
    EmptyPrompt(QueryId),
    #[error(transparent)]
    Connector(#[from] ConnectorError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("bad engine config: {0}")]
    Config(String),
    #[error("query {query}: received chunks cover {got} of {want} tokens")]
    Incomplete {
        query: QueryId,
        got: usize,
        want: usize,
    },
}

struct Active {
    query: SimQuery,
    pages: Vec<PageId>,
    hashes: Vec<u64>,
    matched: usize,
    /// First token computed (rather than loaded) in the current pass.
    from: usize,
    scheduled: Duration,
    first_layer: Duration,
    mode: TransferMode,
    digest: KvDigest,
}

pub struct Engine {
    spec: ModelSpec,
    config: EngineConfig,
    pages: Arc<PagedKVStore>,
    connector: Arc<dyn KvConnector>,
    clock: Arc<Clock>,
    log: Arc<EventLog>,
    /// Submitted, not yet arrived; sorted by arrival.
    pending: VecDeque<SimQuery>,
    ready: VecDeque<SimQuery>,
    /// Queries whose prompt KV is cut into chunks at finish, by chunk size.
    export: Mutex<HashMap<QueryId, usize>>,
    exported: Mutex<HashMap<QueryId, Vec<KVChunk>>>,
}

impl Engine {
    pub fn new(
        spec: ModelSpec,
        config: EngineConfig,
        pages: Arc<PagedKVStore>,
        connector: Arc<dyn KvConnector>,
        clock: Arc<Clock>,
        log: Arc<EventLog>,
    ) -> Result<Self, EngineError> {
        config.cost.validate().map_err(EngineError::Config)?;
        if config.max_concurrent == 0 {
            return Err(EngineError::Config(
                "max_concurrent must be positive".into(),
            ));
        }
        if pages.spec() != &spec {
            return Err(EngineError::Config(
                "page store built for another model".into(),
            ));
        }
        Ok(Self {
            spec,
            config,
            pages,
            connector,
            clock,
            log,
            pending: VecDeque::new(),
            ready: VecDeque::new(),
            export: Mutex::new(HashMap::new()),
            exported: Mutex::new(HashMap::new()),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn pages(&self) -> &Arc<PagedKVStore> {
        &self.pages
    }

    pub fn clock(&self) -> &Arc<Clock> {
        &self.clock
    }

    pub fn log(&self) -> &Arc<EventLog> {
        &self.log
    }

    pub fn connector(&self) -> &Arc<dyn KvConnector> {
        &self.connector
    }

    pub fn is_idle(&self) -> bool {
        self.pending.is_empty() && self.ready.is_empty()
    }

    pub fn queued(&self) -> usize {
        self.pending.len() + self.ready.len()
    }

    pub fn next_arrival(&self) -> Option<Duration> {
        self.ready
            .front()
            .or(self.pending.front())
            .map(|q| q.arrival)
    }

    pub fn submit(&mut self, q: SimQuery) {
        let at = self.pending.partition_point(|p| p.arrival <= q.arrival);
        self.pending.insert(at, q);
        self.admit_arrivals();
    }

    fn admit_arrivals(&mut self) {
        let now = self.clock.now();
        while self.pending.front().is_some_and(|q| q.arrival <= now) {
            let q = self.pending.pop_front().expect("front checked");
            self.connector.prefetch(q.id, &q.tokens);
            self.ready.push_back(q);
        }
    }

    /// Runs everything submitted and returns records in completion order.
    pub fn run(
        &mut self,
        queries: impl IntoIterator<Item = SimQuery>,
    ) -> Result<Vec<QueryRecord>, EngineError> {
        for q in queries {
            self.submit(q);
        }
        let mut out = Vec::new();
        while !self.is_idle() {
            out.extend(self.step()?);
        }
        Ok(out)
    }

    pub fn run_query(&mut self, q: SimQuery) -> Result<QueryRecord, EngineError> {
        let id = q.id;
        let mut recs = self.run([q])?;
        recs.retain(|r| r.id == id);
        Ok(recs.pop().expect("submitted query finishes"))
    }

    /// Keeps the prompt KV of `query` as chunks when it finishes; collect
    /// them with [`take_export`](Self::take_export).
    pub fn export_on_finish(&self, query: QueryId, chunk_size: usize) {
        self.export.lock().insert(query, chunk_size);
    }

    pub fn take_export(&self, query: QueryId) -> Option<Vec<KVChunk>> {
        self.exported.lock().remove(&query)
    }

    /// Starts decoding `q` from prompt KV computed elsewhere, given as
    /// chunks in token order.
    pub fn resume(&mut self, q: SimQuery, chunks: &[KVChunk]) -> Result<QueryRecord, EngineError> {
        let n = q.tokens.len();
        let got: usize = chunks.iter().map(KVChunk::token_count).sum();
        if got != n {
            return Err(EngineError::Incomplete {
                query: q.id,
                got,
                want: n,
            });
        }
        let needed = self.spec.pages_for(n + q.max_output);
        let pages = self.pages.alloc_pages(q.id, needed)?;
        let mut a = Active {
            hashes: prefix_hashes(&q.tokens),
            pages,
            matched: n,
            from: n,
            scheduled: self.clock.now(),
            first_layer: self.clock.now(),
            mode: TransferMode::Blocking,
            digest: KvDigest::default(),
            query: q,
        };
        let res = (|| {
            let mut start = 0;
            for c in chunks {
                for l in 0..self.spec.num_layers {
                    self.pages.write_tokens(&a.pages, l, start, c.layer(l))?;
                }
                start += c.token_count();
            }
            for l in 0..self.spec.num_layers {
                self.compute_layer(&mut a, l)?;
            }
            Ok::<_, EngineError>(())
        })();
        if let Err(e) = res {
            self.release(a.query.id);
            return Err(e);
        }
        Ok(self.decode(vec![a])?.pop().expect("one query decoded"))
    }

    fn export_chunks(&self, a: &Active, chunk_size: usize) -> Result<Vec<KVChunk>, KvError> {
        let keys = chunk_keys(&a.query.tokens, chunk_size, &self.spec.model_tag);
        chunk_spans(a.query.tokens.len(), chunk_size)
            .into_iter()
            .zip(keys)
            .map(|(span, key)| {
                let layers: Vec<Vec<u8>> = (0..self.spec.num_layers)
                    .map(|l| {
                        let mut v = vec![0u8; self.spec.layer_bytes(span.len())];
                        self.pages
                            .read_tokens(&a.pages, l, span.start, &mut v)
                            .map(|_| v)
                    })
                    .collect::<Result<_, _>>()?;
                KVChunk::from_layers(key, &self.spec, span.len(), &layers)
            })
            .collect()
    }

    /// Schedules one batch and runs it to completion. Idles until the next
    /// arrival when nothing is ready.
    pub fn step(&mut self) -> Result<Vec<QueryRecord>, EngineError> {
        self.admit_arrivals();
        if self.ready.is_empty() {
            match self.pending.front() {
                Some(q) => {
                    let t = q.arrival;
                    self.clock.wait_until(t);
                    self.admit_arrivals();
                }
                None => return Ok(Vec::new()),
            }
        }
        let batch = self.schedule()?;
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let ids: Vec<QueryId> = batch.iter().map(|a| a.query.id).collect();
        let meta = match self
            .connector
            .build_connector_meta(&SchedulerOutput { queries: ids })
        {
            Ok(m) => m,
            Err(e) => {
                for a in &batch {
                    self.release(a.query.id);
                }
                return Err(e.into());
            }
        };
        let mut batch = batch;
        for a in &mut batch {
            a.mode = meta.mode;
        }
        let res = self
            .prefill(&meta, &mut batch)
            .and_then(|()| self.decode(batch));
        if res.is_err() {
            for q in &meta.queries {
                self.release(q.query_id);
            }
        }
        res
    }

    fn release(&self, q: QueryId) {
        self.pages.free_query(q);
        self.connector.request_finished(q);
    }

    /// FIFO admission until slots or pages run out.
    fn schedule(&mut self) -> Result<Vec<Active>, EngineError> {
        let mut batch = Vec::new();
        while batch.len() < self.config.max_concurrent {
            let Some(q) = self.ready.front() else { break };
            if q.tokens.is_empty() {
                let q = self.ready.pop_front().expect("front checked");
                return Err(EngineError::EmptyPrompt(q.id));
            }
            let needed = self.spec.pages_for(q.tokens.len() + q.max_output);
            if needed > self.pages.num_pages() {
                let q = self.ready.pop_front().expect("front checked");
                return Err(EngineError::TooLarge {
                    query: q.id,
                    needed,
                    capacity: self.pages.num_pages(),
                });
            }
            let matched = self.connector.get_num_new_matched_tokens(q.id, &q.tokens);
            let pages = match self.pages.alloc_pages(q.id, needed) {
                Ok(p) => p,
                Err(KvError::OutOfPages { .. }) if !batch.is_empty() => {
                    // retried next step
                    self.connector.request_finished(q.id);
                    break;
                }
                Err(e) => return Err(e.into()),
            };
            let external = self.spec.pages_for(matched);
            if let Err(e) = self
                .connector
                .update_state_after_alloc(q.id, &pages, external)
            {
                self.release(q.id);
                return Err(e.into());
            }
            let q = self.ready.pop_front().expect("front checked");
            let hashes = prefix_hashes(&q.tokens);
            batch.push(Active {
                query: q,
                pages,
                hashes,
                matched,
                from: matched,
                scheduled: Duration::ZERO,
                first_layer: Duration::ZERO,
                mode: TransferMode::Blocking,
                digest: KvDigest::default(),
            });
        }
        let now = self.clock.now();
        for a in &mut batch {
            a.scheduled = now;
        }
        Ok(batch)
    }

    /// Writes the model's KV for `[from, to)` at `layer`.
    fn write_kv(&self, a: &Active, layer: usize, from: usize, to: usize) -> Result<(), KvError> {
        if from >= to {
            return Ok(());
        }
        let mut buf = vec![0u8; self.spec.layer_bytes(to - from)];
        fill_tokens(&self.spec, &a.hashes[from..to], layer, &mut buf);
        self.pages.write_tokens(&a.pages, layer, from, &buf)
    }

    /// Forward pass over the prompt at one layer: write new KV, then read
    /// the whole context. Returns the modeled compute time.
    fn compute_layer(&self, a: &mut Active, layer: usize) -> Result<u64, KvError> {
        let n = a.query.tokens.len();
        self.write_kv(a, layer, a.from, n)?;
        let mut ctx = vec![0u8; self.spec.layer_bytes(n)];
        self.pages.read_tokens(&a.pages, layer, 0, &mut ctx)?;
        a.digest.absorb(layer, &ctx);
        let total = self.config.cost.suffix_ns(a.from, n);
        Ok(CostModel::layer_share(total, layer, self.spec.num_layers))
    }

    /// Falls back to recompute from each fault's safe prefix. Layers below
    /// `layer` were already computed and get the missing tokens rewritten.
    fn apply_faults(
        &self,
        batch: &mut [Active],
        faults: &[LoadFault],
        layer: usize,
    ) -> Result<(), KvError> {
        let layers = self.spec.num_layers;
        let mut extra = 0;
        for f in faults {
            let Some(a) = batch.iter_mut().find(|a| a.query.id == f.query) else {
                continue;
            };
            if f.safe_prefix >= a.from {
                continue;
            }
            let (safe, old) = (f.safe_prefix, a.from);
            let total = self.config.cost.suffix_ns(safe, old);
            for l in 0..layer {
                self.write_kv(a, l, safe, old)?;
                extra += CostModel::layer_share(total, l, layers);
            }
            a.from = safe;
            self.log
                .record(EventKind::Degraded, None, Some(a.query.id), Some(layer));
            tracing::debug!(query = a.query.id, safe, "load fault, recomputing");
        }
        if extra > 0 {
            self.clock.spend(Duration::from_nanos(extra));
        }
        Ok(())
    }

    fn faults_of(r: Result<(), ConnectorError>) -> Result<Vec<LoadFault>, ConnectorError> {
        match r {
            Ok(()) => Ok(Vec::new()),
            Err(ConnectorError::ChunkMissing(f)) => Ok(f),
            Err(e) => Err(e),
        }
    }

    fn compute_all(
        &self,
        meta: &BatchMetadata,
        batch: &mut [Active],
        layer: usize,
    ) -> Result<(), EngineError> {
        let start = self.clock.now();
        let mut cost = 0;
        for a in batch.iter_mut() {
            if layer == 0 {
                a.first_layer = start;
            }
            self.log.record(
                EventKind::ComputeBegin,
                Some(meta.id),
                Some(a.query.id),
                Some(layer),
            );
            cost += self.compute_layer(a, layer)?;
        }
        self.clock.wait_until(start + Duration::from_nanos(cost));
        for a in batch.iter() {
            self.log.record(
                EventKind::ComputeEnd,
                Some(meta.id),
                Some(a.query.id),
                Some(layer),
            );
        }
        Ok(())
    }

    fn prefill(&self, meta: &BatchMetadata, batch: &mut [Active]) -> Result<(), EngineError> {
        let c = &self.connector;
        let layers = self.spec.num_layers;
        let faults = Self::faults_of(c.start_load_kv(meta))?;
        self.apply_faults(batch, &faults, 0)?;
        match meta.mode {
            TransferMode::Layerwise => {
                for l in 0..layers {
                    let faults = Self::faults_of(c.wait_load_kv(meta, l))?;
                    self.apply_faults(batch, &faults, l)?;
                    self.compute_all(meta, batch, l)?;
                    if l > 0 {
                        c.wait_store_kv(meta, l - 1)?;
                    }
                    c.start_store_kv(meta)?;
                }
                c.wait_store_kv(meta, layers - 1)?;
            }
            TransferMode::Blocking => {
                for l in 0..layers {
                    self.compute_all(meta, batch, l)?;
                }
                c.start_store_kv(meta)?;
            }
        }
        Ok(())
    }

    fn decode(&self, batch: Vec<Active>) -> Result<Vec<QueryRecord>, EngineError> {
        let t0 = self.clock.now();
        let mut live = Vec::new();
        for mut a in batch {
            let n = a.query.tokens.len();
            let out = output_tokens(&a.query.tokens, a.query.max_output, self.config.vocab);
            if !out.is_empty() {
                self.connector
                    .begin_decode(a.query.id, &a.query.tokens, &a.pages);
            }
            extend_hashes(0, &out, &mut a.hashes);
            debug_assert_eq!(a.hashes.len(), n + out.len());
            live.push((a, out, vec![t0]));
        }
        let mut done = Vec::new();
        let mut step = 0;
        while !live.is_empty() {
            let mut i = 0;
            while i < live.len() {
                let (a, out, _) = &live[i];
                if step == out.len() {
                    let (a, out, times) = live.swap_remove(i);
                    done.push(self.finish(a, out, times));
                } else {
                    let pos = a.query.tokens.len() + step;
                    let mut digest = a.digest;
                    for l in 0..self.spec.num_layers {
                        self.write_kv(a, l, pos, pos + 1)?;
                        let mut kv = vec![0u8; self.spec.layer_bytes(1)];
                        self.pages.read_tokens(&a.pages, l, pos, &mut kv)?;
                        digest.absorb(l, &kv);
                    }
                    self.connector
                        .save_decode_token(a.query.id, out[step], pos, &a.pages);
                    live[i].0.digest = digest;
                    i += 1;
                }
            }
            if live.is_empty() {
                break;
            }
            self.clock.spend(self.config.cost.decode_step());
            let now = self.clock.now();
            step += 1;
            for (_, out, times) in &mut live {
                if step < out.len() {
                    times.push(now);
                }
            }
        }
        done.sort_by_key(|r| r.id);
        Ok(done)
    }

    fn finish(&self, a: Active, out: Vec<TokenId>, times: Vec<Duration>) -> QueryRecord {
        let id = a.query.id;
        if !out.is_empty() {
            self.connector.finish_decode(id);
        }
        if let Some(cs) = self.export.lock().remove(&id) {
            match self.export_chunks(&a, cs) {
                Ok(c) => {
                    self.exported.lock().insert(id, c);
                }
                Err(e) => tracing::warn!(query = id, error = %e, "export failed"),
            }
        }
        self.release(id);
        let finish = self.clock.now();
        QueryRecord {
            id,
            prompt_tokens: a.query.tokens.len(),
            arrival: a.query.arrival,
            scheduled: a.scheduled,
            first_layer: a.first_layer,
            first_token: times[0],
            finish,
            itl: times.windows(2).map(|w| w[1] - w[0]).collect(),
            matched: a.matched,
            reused: a.from,
            mode: a.mode,
            output: QueryOutput {
                tokens: out,
                kv_digest: a.digest.0,
            },
        }
    }
}
