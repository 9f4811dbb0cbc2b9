//! Token chunking and prefix-chained chunk keys.
//!
//! A token sequence is tiled into fixed-size spans (the last one may be
//! shorter). Each span gets a [`ChunkKey`] whose digest covers the model tag,
//! the digest of the preceding chunk and the span's tokens, so two sequences
//! share the key of chunk `i` exactly when they share every token up to the
//! end of that chunk.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

/// Vocabulary index.
pub type TokenId = u32;

/// Chunk span used when nothing else is configured.
pub const DEFAULT_CHUNK_SIZE: usize = 256;

const KEY_DOMAIN: &[u8] = b"kvtier/chunk-key/v1\0";

/// Half-open token index range `[start, end)` covered by one chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChunkSpan {
    pub start: usize,
    pub end: usize,
}

impl ChunkSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// 256-bit chunk digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Digest(out))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Identity of one stored chunk.
///
/// Equality and hashing only look at the digest: the digest already commits
/// to the model tag and to the chunk's position in its sequence.
#[derive(Clone)]
pub struct ChunkKey {
    pub digest: Digest,
    pub model_tag: Arc<str>,
    pub chunk_index: u32,
}

impl ChunkKey {
    pub fn new(digest: Digest, model_tag: impl Into<Arc<str>>, chunk_index: u32) -> Self {
        Self {
            digest,
            model_tag: model_tag.into(),
            chunk_index,
        }
    }
}

impl PartialEq for ChunkKey {
    fn eq(&self, other: &Self) -> bool {
        self.digest == other.digest
    }
}

impl Eq for ChunkKey {}

impl std::hash::Hash for ChunkKey {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.digest.hash(state)
    }
}

impl fmt::Debug for ChunkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ChunkKey({}#{} {:?})",
            self.model_tag, self.chunk_index, self.digest
        )
    }
}

/// Membership oracle used by prefix matching.
pub trait ChunkIndex {
    fn contains_key(&self, key: &ChunkKey) -> bool;
}

impl<F: Fn(&ChunkKey) -> bool> ChunkIndex for F {
    fn contains_key(&self, key: &ChunkKey) -> bool {
        self(key)
    }
}

impl ChunkIndex for std::collections::HashSet<ChunkKey> {
    fn contains_key(&self, key: &ChunkKey) -> bool {
        self.contains(key)
    }
}

impl ChunkIndex for std::collections::HashSet<Digest> {
    fn contains_key(&self, key: &ChunkKey) -> bool {
        self.contains(&key.digest)
    }
}

/// Tiles `[0, len)` into spans of `chunk_size`; the final span may be short.
pub fn chunk_spans(len: usize, chunk_size: usize) -> Vec<ChunkSpan> {
    assert!(chunk_size >= 1, "chunk_size must be positive");
    (0..len)
        .step_by(chunk_size)
        .map(|start| ChunkSpan {
            start,
            end: (start + chunk_size).min(len),
        })
        .collect()
}

pub fn chunk_tokens(tokens: &[TokenId], chunk_size: usize) -> Vec<ChunkSpan> {
    chunk_spans(tokens.len(), chunk_size)
}

/// Digest of one chunk given its parent digest.
pub fn chain_digest(model_tag: &str, parent: &Digest, tokens: &[TokenId]) -> Digest {
    let mut h = Sha256::new();
    h.update(KEY_DOMAIN);
    h.update((model_tag.len() as u32).to_le_bytes());
    h.update(model_tag.as_bytes());
    h.update(parent.0);
    h.update((tokens.len() as u32).to_le_bytes());
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    Digest(h.finalize().into())
}

/// Prefix-chained keys for every chunk of `tokens`.
pub fn chunk_keys(tokens: &[TokenId], chunk_size: usize, model_tag: &str) -> Vec<ChunkKey> {
    let tag: Arc<str> = Arc::from(model_tag);
    let mut parent = Digest::ZERO;
    chunk_tokens(tokens, chunk_size)
        .into_iter()
        .enumerate()
        .map(|(i, span)| {
            let digest = chain_digest(model_tag, &parent, &tokens[span.range()]);
            parent = digest;
            ChunkKey {
                digest,
                model_tag: tag.clone(),
                chunk_index: i as u32,
            }
        })
        .collect()
}

/// Number of leading tokens whose chunks are all present in `index`.
///
/// Stops at the first absent chunk. A short final chunk counts only when its
/// exact key is present, which means the stored chunk had the same length.
pub fn longest_prefix_match(
    tokens: &[TokenId],
    chunk_size: usize,
    model_tag: &str,
    index: &impl ChunkIndex,
) -> usize {
    let keys = chunk_keys(tokens, chunk_size, model_tag);
    matched_prefix(&keys, tokens.len(), chunk_size, index)
}

/// Same as [`longest_prefix_match`] over precomputed keys.
pub fn matched_prefix(
    keys: &[ChunkKey],
    total_tokens: usize,
    chunk_size: usize,
    index: &impl ChunkIndex,
) -> usize {
    let hits = keys.iter().take_while(|k| index.contains_key(k)).count();
    (hits * chunk_size).min(total_tokens)
}
