#![allow(dead_code)]

use kvtier_core::token::chunk_keys;
use kvtier_core::{KVChunk, ModelSpec, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_spec() -> ModelSpec {
    ModelSpec::new("t-2l-64", 2, 64)
}

pub fn tokens(seed: u64, n: usize) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..50_000)).collect()
}

/// One chunk per `chunk_size` span of `toks`, filled with seeded bytes.
pub fn chunks(spec: &ModelSpec, toks: &[TokenId], chunk_size: usize, seed: u64) -> Vec<KVChunk> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    chunk_keys(toks, chunk_size, &spec.model_tag)
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let tc = (toks.len() - i * chunk_size).min(chunk_size);
            let mut buf = vec![0u8; spec.chunk_bytes(tc)];
            rng.fill(&mut buf[..]);
            KVChunk::seal(k, spec, tc, buf).unwrap()
        })
        .collect()
}
