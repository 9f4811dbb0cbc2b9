//! The simulated model: deterministic KV bytes and output tokens.
//!
//! A token's KV at a layer is a pseudo-random stream seeded by a rolling
//! hash of the whole prefix up to and including that token, so equal
//! prefixes give equal KV, as in a real transformer. Outputs are a keyed
//! hash of the prompt and position, so they never depend on caching.

use kvtier_core::{ModelSpec, TokenId};

pub fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Rolling prefix hash: `h[i]` covers `tokens[..=i]` after `seed`.
pub fn extend_hashes(seed: u64, tokens: &[TokenId], out: &mut Vec<u64>) {
    let mut h = out.last().copied().unwrap_or(seed);
    for &t in tokens {
        h = mix(h ^ (u64::from(t) << 1 | 1));
        out.push(h);
    }
}

pub fn prefix_hashes(tokens: &[TokenId]) -> Vec<u64> {
    let mut v = Vec::with_capacity(tokens.len());
    extend_hashes(0x6b76_7469_6572, tokens, &mut v);
    v
}

/// Fills `out` with the KV of the token whose prefix hash is `h`.
pub fn fill_token(h: u64, layer: usize, out: &mut [u8]) {
    let mut s = mix(h ^ (layer as u64).wrapping_mul(0xd6e8_feb8_6659_fd93));
    let mut chunks = out.chunks_exact_mut(8);
    for c in &mut chunks {
        s = s.wrapping_add(0x9e37_79b9_7f4a_7c15);
        c.copy_from_slice(&mix(s).to_le_bytes());
    }
    let rest = chunks.into_remainder();
    if !rest.is_empty() {
        let v = mix(s ^ 0xff).to_le_bytes();
        rest.copy_from_slice(&v[..rest.len()]);
    }
}

/// KV of consecutive tokens `hashes` at `layer`, packed token-major.
pub fn fill_tokens(spec: &ModelSpec, hashes: &[u64], layer: usize, out: &mut [u8]) {
    let n = spec.bytes_per_token_per_layer;
    debug_assert_eq!(out.len(), hashes.len() * n);
    for (h, dst) in hashes.iter().zip(out.chunks_exact_mut(n)) {
        fill_token(*h, layer, dst);
    }
}

/// Output tokens of a prompt. Depends only on the prompt.
pub fn output_tokens(prompt: &[TokenId], count: usize, vocab: u32) -> Vec<TokenId> {
    let key = prompt_key(prompt);
    (0..count as u64)
        .map(|j| (mix(key ^ mix(j)) % u64::from(vocab.max(1))) as TokenId)
        .collect()
}

fn prompt_key(prompt: &[TokenId]) -> u64 {
    let mut bytes = Vec::with_capacity(prompt.len() * 4);
    for t in prompt {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    kvtier_core::checksum(&bytes)
}

/// Order-sensitive fold of per-layer checksums.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KvDigest(pub u64);

impl KvDigest {
    pub fn absorb(&mut self, layer: usize, bytes: &[u8]) {
        self.0 = mix(self.0 ^ kvtier_core::checksum(bytes) ^ ((layer as u64) << 48));
    }
}
