//! Delayed storing of decode-time KV: tokens accumulate per query and are
//! written as one chunk once a full chunk span is available.

use crate::kv::{KVChunk, KvError, ModelSpec, QueryId};
use crate::token::{chain_digest, chunk_keys, ChunkKey, Digest, TokenId};

pub struct DecodeAccumulator {
    query_id: QueryId,
    chunk_size: usize,
    model_tag: String,
    /// Index of the first token not yet covered by a flushed chunk.
    boundary: usize,
    parent: Digest,
    chunk_index: u32,
    pending_tokens: Vec<TokenId>,
    pending: Vec<Vec<u8>>,
    bytes_per_token_per_layer: usize,
    flushed: usize,
}

impl DecodeAccumulator {
    /// `history` is every token of the query so far; `tail` holds, per layer,
    /// the KV of the tokens after the last chunk boundary of `history`.
    pub fn new(
        query_id: QueryId,
        spec: &ModelSpec,
        chunk_size: usize,
        history: &[TokenId],
        tail: Vec<Vec<u8>>,
    ) -> Result<Self, KvError> {
        let boundary = history.len() / chunk_size * chunk_size;
        let tail_tokens = history.len() - boundary;
        if tail.len() != spec.num_layers {
            return Err(KvError::SizeMismatch {
                expected: spec.num_layers,
                actual: tail.len(),
            });
        }
        for l in &tail {
            if l.len() != spec.layer_bytes(tail_tokens) {
                return Err(KvError::SizeMismatch {
                    expected: spec.layer_bytes(tail_tokens),
                    actual: l.len(),
                });
            }
        }
        let keys = chunk_keys(&history[..boundary], chunk_size, &spec.model_tag);
        let parent = keys.last().map(|k| k.digest).unwrap_or(Digest::ZERO);
        Ok(Self {
            query_id,
            chunk_size,
            model_tag: spec.model_tag.clone(),
            boundary,
            parent,
            chunk_index: keys.len() as u32,
            pending_tokens: history[boundary..].to_vec(),
            pending: tail,
            bytes_per_token_per_layer: spec.bytes_per_token_per_layer,
            flushed: 0,
        })
    }

    pub fn query_id(&self) -> QueryId {
        self.query_id
    }

    pub fn pending_tokens(&self) -> usize {
        self.pending_tokens.len()
    }

    pub fn flushed_chunks(&self) -> usize {
        self.flushed
    }

    /// Appends one token's KV (one slice per layer). Returns the sealed chunk
    /// when this token completes a chunk span.
    pub fn append(&mut self, token: TokenId, layers: &[&[u8]]) -> Result<Option<KVChunk>, KvError> {
        if layers.len() != self.pending.len() {
            return Err(KvError::SizeMismatch {
                expected: self.pending.len(),
                actual: layers.len(),
            });
        }
        for (dst, src) in self.pending.iter_mut().zip(layers) {
            if src.len() != self.bytes_per_token_per_layer {
                return Err(KvError::SizeMismatch {
                    expected: self.bytes_per_token_per_layer,
                    actual: src.len(),
                });
            }
            dst.extend_from_slice(src);
        }
        self.pending_tokens.push(token);
        if self.pending_tokens.len() == self.chunk_size {
            return self.seal().map(Some);
        }
        Ok(None)
    }

    /// Seals whatever is pending as a (possibly short) final chunk.
    pub fn finish(&mut self) -> Result<Option<KVChunk>, KvError> {
        if self.pending_tokens.is_empty() {
            return Ok(None);
        }
        self.seal().map(Some)
    }

    fn seal(&mut self) -> Result<KVChunk, KvError> {
        let digest = chain_digest(&self.model_tag, &self.parent, &self.pending_tokens);
        let key = ChunkKey::new(digest, self.model_tag.as_str(), self.chunk_index);
        let n = self.pending_tokens.len();
        let layers = self.pending.len();
        let mut payload = Vec::with_capacity(layers * n * self.bytes_per_token_per_layer);
        for l in &mut self.pending {
            payload.extend_from_slice(l);
            l.clear();
        }
        let chunk = KVChunk::with_shape(
            key,
            n,
            layers,
            self.bytes_per_token_per_layer,
            payload.into(),
        )?;
        // only a full span advances the chain; a short final chunk ends it
        if n == self.chunk_size {
            self.parent = digest;
            self.chunk_index += 1;
            self.boundary += n;
        }
        self.pending_tokens.clear();
        self.flushed += 1;
        Ok(chunk)
    }
}
