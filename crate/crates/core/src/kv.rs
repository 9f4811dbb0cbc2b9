//! KV payload model and the paged memory that stands in for engine GPU memory.

use std::collections::{HashMap, VecDeque};
use std::ops::RangeInclusive;

use bytes::Bytes;
use parking_lot::{Mutex, MutexGuard};
use serde::{Deserialize, Serialize};

use crate::storage::TierId;
use crate::token::{ChunkKey, ChunkSpan};

pub type PageId = u32;
pub type QueryId = u64;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum KvError {
    #[error("out of pages: requested {requested}, {free} free")]
    OutOfPages { requested: usize, free: usize },
    #[error("page {page} of layer {layer} was read before being written")]
    UnpopulatedPage { page: PageId, layer: usize },
    #[error("buffer of {actual} bytes does not match expected {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("page {0} is not allocated")]
    NotAllocated(PageId),
    #[error("layer {layer} out of range for {num_layers} layers")]
    BadLayer { layer: usize, num_layers: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
}

/// Shape of the KV cache for one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_tag: String,
    pub num_layers: usize,
    pub bytes_per_token_per_layer: usize,
    #[serde(default = "default_page_tokens")]
    pub page_tokens: usize,
}

fn default_page_tokens() -> usize {
    16
}

impl Default for ModelSpec {
    /// 8 layers of 4 KiB per token: one 16-token page is 64 KiB per layer.
    fn default() -> Self {
        Self {
            model_tag: "sim-8l-4k".into(),
            num_layers: 8,
            bytes_per_token_per_layer: 4096,
            page_tokens: 16,
        }
    }
}

impl ModelSpec {
    pub fn new(
        model_tag: impl Into<String>,
        num_layers: usize,
        bytes_per_token_per_layer: usize,
    ) -> Self {
        Self {
            model_tag: model_tag.into(),
            num_layers,
            bytes_per_token_per_layer,
            page_tokens: 16,
        }
    }

    pub fn validate(&self, chunk_size: usize) -> Result<(), KvError> {
        if self.num_layers == 0 || self.bytes_per_token_per_layer == 0 || self.page_tokens == 0 {
            return Err(KvError::InvalidSpec("dimensions must be positive".into()));
        }
        if chunk_size == 0 || !chunk_size.is_multiple_of(self.page_tokens) {
            return Err(KvError::InvalidSpec(format!(
                "page_tokens {} must divide chunk_size {}",
                self.page_tokens, chunk_size
            )));
        }
        if chunk_size > u16::MAX as usize || self.num_layers > u16::MAX as usize {
            return Err(KvError::InvalidSpec(
                "chunk_size and num_layers must fit in u16".into(),
            ));
        }
        Ok(())
    }

    /// Bytes of one page of one layer.
    pub fn page_bytes(&self) -> usize {
        self.page_tokens * self.bytes_per_token_per_layer
    }

    pub fn layer_bytes(&self, tokens: usize) -> usize {
        tokens * self.bytes_per_token_per_layer
    }

    pub fn chunk_bytes(&self, tokens: usize) -> usize {
        self.num_layers * self.layer_bytes(tokens)
    }

    pub fn pages_for(&self, tokens: usize) -> usize {
        tokens.div_ceil(self.page_tokens)
    }
}

/// Sealed KV payload of one chunk, laid out layer-major.
///
/// The payload is reference counted and never mutated after sealing; clones
/// share the same bytes.
#[derive(Clone, PartialEq, Eq)]
pub struct KVChunk {
    key: ChunkKey,
    token_count: usize,
    num_layers: usize,
    bytes_per_token_per_layer: usize,
    payload: Bytes,
}

impl std::fmt::Debug for KVChunk {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KVChunk")
            .field("key", &self.key)
            .field("token_count", &self.token_count)
            .field("num_layers", &self.num_layers)
            .field("bytes", &self.payload.len())
            .finish()
    }
}

impl KVChunk {
    pub fn seal(
        key: ChunkKey,
        spec: &ModelSpec,
        token_count: usize,
        payload: impl Into<Bytes>,
    ) -> Result<Self, KvError> {
        Self::with_shape(
            key,
            token_count,
            spec.num_layers,
            spec.bytes_per_token_per_layer,
            payload.into(),
        )
    }

    pub fn with_shape(
        key: ChunkKey,
        token_count: usize,
        num_layers: usize,
        bytes_per_token_per_layer: usize,
        payload: Bytes,
    ) -> Result<Self, KvError> {
        let expected = token_count * num_layers * bytes_per_token_per_layer;
        if token_count == 0 || payload.len() != expected {
            return Err(KvError::SizeMismatch {
                expected,
                actual: payload.len(),
            });
        }
        Ok(Self {
            key,
            token_count,
            num_layers,
            bytes_per_token_per_layer,
            payload,
        })
    }

    /// Builds a chunk by concatenating one region per layer.
    pub fn from_layers<B: AsRef<[u8]>>(
        key: ChunkKey,
        spec: &ModelSpec,
        token_count: usize,
        layers: &[B],
    ) -> Result<Self, KvError> {
        let region = spec.layer_bytes(token_count);
        let mut buf = Vec::with_capacity(region * layers.len());
        for l in layers {
            let l = l.as_ref();
            if l.len() != region {
                return Err(KvError::SizeMismatch {
                    expected: region,
                    actual: l.len(),
                });
            }
            buf.extend_from_slice(l);
        }
        Self::seal(key, spec, token_count, buf)
    }

    pub fn key(&self) -> &ChunkKey {
        &self.key
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn bytes_per_token_per_layer(&self) -> usize {
        self.bytes_per_token_per_layer
    }

    pub fn layer_len(&self) -> usize {
        self.token_count * self.bytes_per_token_per_layer
    }

    pub fn layer(&self, layer: usize) -> &[u8] {
        let n = self.layer_len();
        &self.payload[layer * n..(layer + 1) * n]
    }

    pub fn payload(&self) -> &Bytes {
        &self.payload
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    pub fn checksum(&self) -> u64 {
        crate::checksum(&self.payload)
    }
}

/// Where a chunk's bytes live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChunkLocation {
    /// Stored in a cache tier; `offset` is tier-specific (slot index, 0 for files).
    Tier { tier: TierId, offset: u64 },
    /// Resident in engine pages; `pages` covers the span in token order.
    Pages(Vec<PageId>),
}

/// Names the bytes of one chunk over a layer range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkDescriptor {
    pub key: ChunkKey,
    pub span: ChunkSpan,
    pub layers: RangeInclusive<usize>,
    pub location: ChunkLocation,
}

struct LayerMem {
    bytes: Vec<u8>,
    populated: Vec<bool>,
}

#[derive(Default)]
struct PageTable {
    free: VecDeque<PageId>,
    by_query: HashMap<QueryId, Vec<PageId>>,
    owner: HashMap<PageId, QueryId>,
}

/// Fixed pool of pages, each `page_tokens` tokens of one layer, addressed by
/// a page id shared across layers.
///
/// Layer memory is locked per layer so a loader can fill layer `L + 1` while
/// the engine reads layer `L`.
pub struct PagedKVStore {
    spec: ModelSpec,
    num_pages: usize,
    layers: Vec<Mutex<LayerMem>>,
    table: Mutex<PageTable>,
}

impl PagedKVStore {
    pub fn new(spec: ModelSpec, num_pages: usize) -> Self {
        let page_bytes = spec.page_bytes();
        let layers = (0..spec.num_layers)
            .map(|_| {
                Mutex::new(LayerMem {
                    bytes: vec![0u8; num_pages * page_bytes],
                    populated: vec![false; num_pages],
                })
            })
            .collect();
        let table = PageTable {
            free: (0..num_pages as PageId).collect(),
            ..Default::default()
        };
        Self {
            spec,
            num_pages,
            layers,
            table: Mutex::new(table),
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_pages(&self) -> usize {
        self.num_pages
    }

    pub fn free_count(&self) -> usize {
        self.table.lock().free.len()
    }

    pub fn free_pages(&self) -> Vec<PageId> {
        self.table.lock().free.iter().copied().collect()
    }

    pub fn allocated_count(&self) -> usize {
        self.table.lock().by_query.values().map(Vec::len).sum()
    }

    pub fn pages_of(&self, query: QueryId) -> Vec<PageId> {
        self.table
            .lock()
            .by_query
            .get(&query)
            .cloned()
            .unwrap_or_default()
    }

    pub fn owner_of(&self, page: PageId) -> Option<QueryId> {
        self.table.lock().owner.get(&page).copied()
    }

    /// Takes `pages_needed` pages off the free list, all or nothing.
    pub fn alloc_pages(&self, query: QueryId, pages_needed: usize) -> Result<Vec<PageId>, KvError> {
        let mut t = self.table.lock();
        if t.free.len() < pages_needed {
            return Err(KvError::OutOfPages {
                requested: pages_needed,
                free: t.free.len(),
            });
        }
        let got: Vec<PageId> = t.free.drain(..pages_needed).collect();
        for &p in &got {
            t.owner.insert(p, query);
        }
        t.by_query.entry(query).or_default().extend_from_slice(&got);
        Ok(got)
    }

    /// Allocates specific free pages (used when an offloader decides which
    /// pages may be handed out). All or nothing.
    pub fn alloc_exact(&self, query: QueryId, pages: &[PageId]) -> Result<(), KvError> {
        let mut t = self.table.lock();
        for p in pages {
            if !t.free.contains(p) {
                return Err(KvError::NotAllocated(*p));
            }
        }
        t.free.retain(|p| !pages.contains(p));
        for &p in pages {
            t.owner.insert(p, query);
        }
        t.by_query
            .entry(query)
            .or_default()
            .extend_from_slice(pages);
        Ok(())
    }

    /// Returns every page of `query` to the free list and clears its
    /// populated flags. Page bytes are left in place.
    pub fn free_query(&self, query: QueryId) -> Vec<PageId> {
        let pages = {
            let mut t = self.table.lock();
            let pages = t.by_query.remove(&query).unwrap_or_default();
            for p in &pages {
                t.owner.remove(p);
                t.free.push_back(*p);
            }
            pages
        };
        for layer in &self.layers {
            let mut mem = layer.lock();
            for &p in &pages {
                mem.populated[p as usize] = false;
            }
        }
        pages
    }

    fn check_layer(&self, layer: usize) -> Result<(), KvError> {
        if layer >= self.spec.num_layers {
            return Err(KvError::BadLayer {
                layer,
                num_layers: self.spec.num_layers,
            });
        }
        Ok(())
    }

    fn check_pages(&self, pages: &[PageId]) -> Result<(), KvError> {
        let t = self.table.lock();
        for &p in pages {
            if !t.owner.contains_key(&p) {
                return Err(KvError::NotAllocated(p));
            }
        }
        Ok(())
    }

    /// Concatenates the listed pages of one layer into a contiguous buffer.
    pub fn gather_pages(&self, pages: &[PageId], layer: usize) -> Result<Vec<u8>, KvError> {
        let mut out = vec![0u8; pages.len() * self.spec.page_bytes()];
        self.gather_into(pages, layer, &mut out)?;
        Ok(out)
    }

    pub fn gather_into(
        &self,
        pages: &[PageId],
        layer: usize,
        out: &mut [u8],
    ) -> Result<(), KvError> {
        self.check_layer(layer)?;
        let pb = self.spec.page_bytes();
        if out.len() != pages.len() * pb {
            return Err(KvError::SizeMismatch {
                expected: pages.len() * pb,
                actual: out.len(),
            });
        }
        self.check_pages(pages)?;
        let mem = self.layers[layer].lock();
        for (i, &p) in pages.iter().enumerate() {
            if !mem.populated[p as usize] {
                return Err(KvError::UnpopulatedPage { page: p, layer });
            }
            let src = p as usize * pb;
            out[i * pb..(i + 1) * pb].copy_from_slice(&mem.bytes[src..src + pb]);
        }
        Ok(())
    }

    /// Splits a contiguous buffer into the listed pages of one layer.
    pub fn scatter_pages(&self, buf: &[u8], pages: &[PageId], layer: usize) -> Result<(), KvError> {
        self.check_layer(layer)?;
        let pb = self.spec.page_bytes();
        if buf.len() != pages.len() * pb {
            return Err(KvError::SizeMismatch {
                expected: pages.len() * pb,
                actual: buf.len(),
            });
        }
        self.check_pages(pages)?;
        let mut mem = self.layers[layer].lock();
        for (i, &p) in pages.iter().enumerate() {
            let dst = p as usize * pb;
            mem.bytes[dst..dst + pb].copy_from_slice(&buf[i * pb..(i + 1) * pb]);
            mem.populated[p as usize] = true;
        }
        Ok(())
    }

    /// Token-granular write into a query's page list: `data` holds whole
    /// tokens starting at token index `first_token` of the page list.
    pub fn write_tokens(
        &self,
        pages: &[PageId],
        layer: usize,
        first_token: usize,
        data: &[u8],
    ) -> Result<(), KvError> {
        let mut guard = self.lock_layer(layer)?;
        guard.write_tokens(pages, first_token, data)
    }

    /// Token-granular read, the inverse of [`write_tokens`](Self::write_tokens).
    pub fn read_tokens(
        &self,
        pages: &[PageId],
        layer: usize,
        first_token: usize,
        out: &mut [u8],
    ) -> Result<(), KvError> {
        let guard = self.lock_layer(layer)?;
        guard.read_tokens(pages, first_token, out)
    }

    /// Locks one layer for a sequence of token-level accesses.
    pub fn lock_layer(&self, layer: usize) -> Result<LayerGuard<'_>, KvError> {
        self.check_layer(layer)?;
        Ok(LayerGuard {
            spec: &self.spec,
            layer,
            mem: self.layers[layer].lock(),
        })
    }
}

/// Exclusive access to one layer of a [`PagedKVStore`].
pub struct LayerGuard<'a> {
    spec: &'a ModelSpec,
    layer: usize,
    mem: MutexGuard<'a, LayerMem>,
}

impl LayerGuard<'_> {
    fn locate(&self, pages: &[PageId], token: usize) -> Result<usize, KvError> {
        let pt = self.spec.page_tokens;
        let page = *pages.get(token / pt).ok_or(KvError::SizeMismatch {
            expected: pages.len() * pt,
            actual: token + 1,
        })?;
        Ok(page as usize * self.spec.page_bytes()
            + (token % pt) * self.spec.bytes_per_token_per_layer)
    }

    fn for_each_run(
        &self,
        pages: &[PageId],
        first_token: usize,
        len: usize,
        mut f: impl FnMut(usize, usize, usize, PageId),
    ) -> Result<(), KvError> {
        let bpt = self.spec.bytes_per_token_per_layer;
        if !len.is_multiple_of(bpt) {
            return Err(KvError::SizeMismatch {
                expected: len.next_multiple_of(bpt),
                actual: len,
            });
        }
        let pt = self.spec.page_tokens;
        let mut token = first_token;
        let mut done = 0;
        while done < len {
            let in_page = pt - token % pt;
            let run = (in_page * bpt).min(len - done);
            let at = self.locate(pages, token)?;
            f(at, done, run, pages[token / pt]);
            done += run;
            token += run / bpt;
        }
        Ok(())
    }

    pub fn write_tokens(
        &mut self,
        pages: &[PageId],
        first_token: usize,
        data: &[u8],
    ) -> Result<(), KvError> {
        let mut runs = Vec::new();
        self.for_each_run(pages, first_token, data.len(), |at, off, n, p| {
            runs.push((at, off, n, p))
        })?;
        for (at, off, n, p) in runs {
            self.mem.bytes[at..at + n].copy_from_slice(&data[off..off + n]);
            self.mem.populated[p as usize] = true;
        }
        Ok(())
    }

    pub fn read_tokens(
        &self,
        pages: &[PageId],
        first_token: usize,
        out: &mut [u8],
    ) -> Result<(), KvError> {
        let mut runs = Vec::new();
        self.for_each_run(pages, first_token, out.len(), |at, off, n, p| {
            runs.push((at, off, n, p))
        })?;
        for (at, off, n, p) in runs {
            if !self.mem.populated[p as usize] {
                return Err(KvError::UnpopulatedPage {
                    page: p,
                    layer: self.layer,
                });
            }
            out[off..off + n].copy_from_slice(&self.mem.bytes[at..at + n]);
        }
        Ok(())
    }

    /// Bytes of one token of this layer.
    pub fn token(&self, pages: &[PageId], token: usize) -> Result<&[u8], KvError> {
        let at = self.locate(pages, token)?;
        let p = pages[token / self.spec.page_tokens];
        if !self.mem.populated[p as usize] {
            return Err(KvError::UnpopulatedPage {
                page: p,
                layer: self.layer,
            });
        }
        Ok(&self.mem.bytes[at..at + self.spec.bytes_per_token_per_layer])
    }
}
