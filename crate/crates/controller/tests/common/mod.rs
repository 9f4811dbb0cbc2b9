#![allow(dead_code)]

use kvtier_controller::{Manager, ManagerConfig, Worker};
use kvtier_core::token::chunk_keys;
use kvtier_core::{KVChunk, ModelSpec, StorageEngine, TierId, TokenId};
use kvtier_transfer::Server;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CHUNK: usize = 256;

pub fn spec() -> ModelSpec {
    ModelSpec::new("ctl-2l-64", 2, 64)
}

/// Chunk bytes depend only on the key, so every instance computes the same
/// KV for the same prefix.
pub fn chunks_for(tokens: &[TokenId]) -> Vec<KVChunk> {
    let spec = spec();
    chunk_keys(tokens, CHUNK, &spec.model_tag)
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let tc = (tokens.len() - i * CHUNK).min(CHUNK);
            let mut rng = ChaCha8Rng::from_seed(*k.digest.as_bytes());
            let mut buf = vec![0u8; spec.chunk_bytes(tc)];
            rng.fill(&mut buf[..]);
            KVChunk::seal(k, &spec, tc, buf).unwrap()
        })
        .collect()
}

pub fn store_tokens(store: &StorageEngine, tokens: &[TokenId]) {
    for c in chunks_for(tokens) {
        if !store.contains_any(c.key()) {
            store.put(c, &[TierId::RamPool], false).wait();
        }
    }
}

pub struct Fleet {
    pub manager: Manager,
    pub server: Server,
    pub workers: Vec<Worker>,
}

impl Fleet {
    /// `n` instances named i0, i1, ... each with `ram_chunks` chunk slots.
    pub fn new(n: usize, ram_chunks: u64) -> Self {
        let manager = Manager::new(ManagerConfig {
            chunk_size: CHUNK,
            model_tag: spec().model_tag,
            ..Default::default()
        });
        let server = manager.serve("127.0.0.1:0").unwrap();
        let slot = spec().chunk_bytes(CHUNK) as u64;
        let workers = (0..n)
            .map(|i| {
                let store = StorageEngine::in_memory(spec(), CHUNK, ram_chunks * slot).unwrap();
                Worker::connect(
                    &format!("i{i}"),
                    &format!("10.0.0.{i}:9000"),
                    store,
                    server.local_addr(),
                )
                .unwrap()
            })
            .collect();
        Self {
            manager,
            server,
            workers,
        }
    }

    pub fn store(&self, i: usize) -> &StorageEngine {
        self.workers[i].store()
    }
}

pub fn session(rng: &mut ChaCha8Rng, len: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.gen_range(0..32_000)).collect()
}
