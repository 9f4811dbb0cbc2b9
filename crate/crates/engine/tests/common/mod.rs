#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use kvtier_core::token::{chunk_keys, chunk_spans};
use kvtier_core::{KVChunk, ModelSpec, PagedKVStore, StorageEngine, TierId, TokenId};
use kvtier_engine::model::{fill_tokens, prefix_hashes};
use kvtier_engine::{
    Clock, ClockMode, Connector, ConnectorConfig, Engine, EngineConfig, EventLog, KvConnector,
    NoopConnector, QueryOutput, SimQuery, TransferMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CS: usize = 256;

pub fn spec() -> ModelSpec {
    ModelSpec::new("sim-test", 4, 64)
}

pub fn tokens(seed: u64, n: usize) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..50_000)).collect()
}

/// The KV a correct model produces for `tokens[..n]` at every layer,
/// computed without the engine.
pub fn reference_kv(spec: &ModelSpec, tokens: &[TokenId]) -> Vec<Vec<u8>> {
    let h = prefix_hashes(tokens);
    (0..spec.num_layers)
        .map(|l| {
            let mut v = vec![0u8; spec.layer_bytes(tokens.len())];
            fill_tokens(spec, &h, l, &mut v);
            v
        })
        .collect()
}

/// Stores the first `count` chunks of `tokens` with reference KV.
pub fn seed_chunks(
    storage: &StorageEngine,
    tokens: &[TokenId],
    count: usize,
    tier: &TierId,
) -> Vec<KVChunk> {
    let spec = storage.spec().clone();
    let cs = storage.chunk_size();
    let kv = reference_kv(&spec, tokens);
    let bpt = spec.bytes_per_token_per_layer;
    let keys = chunk_keys(tokens, cs, &spec.model_tag);
    let mut out = Vec::new();
    for (span, key) in chunk_spans(tokens.len(), cs)
        .into_iter()
        .zip(keys)
        .take(count)
    {
        let layers: Vec<&[u8]> = kv
            .iter()
            .map(|l| &l[span.start * bpt..span.end * bpt])
            .collect();
        let c = KVChunk::from_layers(key, &spec, span.len(), &layers).unwrap();
        assert!(storage
            .put(c.clone(), std::slice::from_ref(tier), false)
            .wait()
            .all_ok());
        out.push(c);
    }
    out
}

pub struct Rig {
    pub storage: StorageEngine,
    pub pages: Arc<PagedKVStore>,
    pub connector: Arc<Connector>,
    pub clock: Arc<Clock>,
    pub log: Arc<EventLog>,
    pub engine: Engine,
}

pub fn engine_config(pages: usize, max_concurrent: usize) -> EngineConfig {
    EngineConfig {
        num_pages: pages,
        max_concurrent,
        ..Default::default()
    }
}

pub fn rig_with(
    storage: StorageEngine,
    cc: ConnectorConfig,
    ec: EngineConfig,
    clock: Arc<Clock>,
) -> Rig {
    let spec = storage.spec().clone();
    let pages = Arc::new(PagedKVStore::new(spec.clone(), ec.num_pages));
    let log = Arc::new(EventLog::new(true));
    let connector = Arc::new(Connector::new(
        storage.clone(),
        pages.clone(),
        cc,
        clock.clone(),
        log.clone(),
    ));
    let engine = Engine::new(
        spec,
        ec,
        pages.clone(),
        connector.clone(),
        clock.clone(),
        log.clone(),
    )
    .unwrap();
    Rig {
        storage,
        pages,
        connector,
        clock,
        log,
        engine,
    }
}

pub fn rig(mode: TransferMode, clock: ClockMode) -> Rig {
    let storage = StorageEngine::in_memory(spec(), CS, 64 << 20).unwrap();
    rig_with(
        storage,
        ConnectorConfig {
            mode,
            ..Default::default()
        },
        engine_config(2048, 4),
        Arc::new(Clock::new(clock)),
    )
}

/// Outputs of a cacheless engine, by query id.
pub fn oracle(spec: &ModelSpec, queries: &[SimQuery]) -> Vec<(u64, QueryOutput)> {
    let clock = Arc::new(Clock::virtual_time());
    let log = Arc::new(EventLog::new(false));
    let pages = Arc::new(PagedKVStore::new(spec.clone(), 8192));
    let noop: Arc<dyn KvConnector> =
        Arc::new(NoopConnector::new(TransferMode::Blocking, log.clone()));
    let mut e = Engine::new(
        spec.clone(),
        engine_config(8192, 4),
        pages,
        noop,
        clock,
        log,
    )
    .unwrap();
    let mut out: Vec<_> = e
        .run(queries.iter().cloned().map(|q| SimQuery {
            arrival: Duration::ZERO,
            ..q
        }))
        .unwrap()
        .into_iter()
        .map(|r| (r.id, r.output))
        .collect();
    out.sort_by_key(|(id, _)| *id);
    out
}

pub fn outputs(recs: &[kvtier_engine::QueryRecord]) -> Vec<(u64, QueryOutput)> {
    let mut v: Vec<_> = recs.iter().map(|r| (r.id, r.output.clone())).collect();
    v.sort_by_key(|(id, _)| *id);
    v
}
