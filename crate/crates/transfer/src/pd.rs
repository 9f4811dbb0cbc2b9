//! Prefill-to-decode KV push.
//!
//! The decoder registers a query before prefill starts and gets one
//! pre-allocated slot per chunk. The prefiller pushes `PD_PUSH` segments;
//! each segment covers a layer range and a page-aligned token range of one
//! chunk, so the same message type carries whole chunks or single pages.
//!
//! ```text
//! PD_PUSH payload: u16 segment count, then per segment
//!   query_id u64 | ordinal u32 | layer_start u16 | layer_count u16
//!   | token_offset u32 | token_count u32 | data_len u32 | data
//! data: for each layer in range, token_count * bytes_per_token_per_layer
//! reply: u32 pages newly filled
//! ```

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use kvtier_core::token::chunk_keys;
use kvtier_core::{ChunkKey, KVChunk, ModelSpec, QueryId, TokenId};
use parking_lot::{Condvar, Mutex};

use crate::body::{Reader, Writer};
use crate::conn::{Connection, Handler, Payload, Reply, Request};
use crate::wire::{ErrCode, Opcode, HEADER_LEN};
use crate::TransferError;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PdError {
    #[error("query {0} is not registered on this decoder")]
    UnknownQuery(QueryId),
    #[error("query {0} is already registered")]
    AlreadyRegistered(QueryId),
    #[error("bad segment: {0}")]
    BadSegment(String),
    #[error("timed out waiting for {missing} pages of query {query}")]
    Timeout { query: QueryId, missing: usize },
    #[error(transparent)]
    Transfer(#[from] TransferError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotState {
    Awaiting,
    Filled,
    Consumed,
}

/// Decoder-side staging region for one chunk of one query.
pub struct PdBufferSlot {
    token_count: usize,
    buf: Vec<u8>,
    /// One flag per (layer, page).
    filled: Vec<bool>,
    missing: usize,
    state: SlotState,
}

impl PdBufferSlot {
    pub fn state(&self) -> SlotState {
        self.state
    }
}

struct PdQuery {
    keys: Vec<ChunkKey>,
    slots: Vec<PdBufferSlot>,
    missing: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment<'a> {
    pub query_id: QueryId,
    pub ordinal: u32,
    pub layer_start: u16,
    pub layer_count: u16,
    pub token_offset: u32,
    pub token_count: u32,
    pub data: &'a [u8],
}

/// Encoded size of a segment header.
pub const SEGMENT_HEADER: usize = 8 + 4 + 2 + 2 + 4 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SegmentHeader {
    query_id: QueryId,
    ordinal: u32,
    layer_start: u16,
    layer_count: u16,
    token_offset: u32,
    token_count: u32,
    data_len: u32,
}

impl SegmentHeader {
    fn encode(&self) -> [u8; SEGMENT_HEADER] {
        let mut w = Writer::with_capacity(SEGMENT_HEADER);
        w.u64(self.query_id)
            .u32(self.ordinal)
            .u16(self.layer_start)
            .u16(self.layer_count)
            .u32(self.token_offset)
            .u32(self.token_count)
            .u32(self.data_len);
        w.finish().try_into().unwrap()
    }

    fn decode(b: &[u8; SEGMENT_HEADER]) -> Self {
        let mut r = Reader::new(b);
        let mut next = || SegmentHeader {
            query_id: r.u64().unwrap(),
            ordinal: r.u32().unwrap(),
            layer_start: r.u16().unwrap(),
            layer_count: r.u16().unwrap(),
            token_offset: r.u32().unwrap(),
            token_count: r.u32().unwrap(),
            data_len: r.u32().unwrap(),
        };
        next()
    }
}

impl Segment<'_> {
    fn header(&self) -> SegmentHeader {
        SegmentHeader {
            query_id: self.query_id,
            ordinal: self.ordinal,
            layer_start: self.layer_start,
            layer_count: self.layer_count,
            token_offset: self.token_offset,
            token_count: self.token_count,
            data_len: self.data.len() as u32,
        }
    }

    fn read<'a>(r: &mut Reader<'a>) -> Result<Segment<'a>, crate::body::BodyError> {
        Ok(Segment {
            query_id: r.u64()?,
            ordinal: r.u32()?,
            layer_start: r.u16()?,
            layer_count: r.u16()?,
            token_offset: r.u32()?,
            token_count: r.u32()?,
            data: r.bytes()?,
        })
    }
}

/// Decoder side: slots per registered query, filled by `PD_PUSH`.
pub struct PdReceiver {
    spec: ModelSpec,
    chunk_size: usize,
    queries: Mutex<HashMap<QueryId, Arc<Mutex<PdQuery>>>>,
    progress: Mutex<()>,
    cv: Condvar,
}

impl PdReceiver {
    pub fn new(spec: ModelSpec, chunk_size: usize) -> Arc<Self> {
        Arc::new(Self {
            spec,
            chunk_size,
            queries: Mutex::new(HashMap::new()),
            progress: Mutex::new(()),
            cv: Condvar::new(),
        })
    }

    /// Allocates slots for every chunk of `tokens`. Returns the chunk count.
    pub fn register(&self, query: QueryId, tokens: &[TokenId]) -> Result<usize, PdError> {
        let keys = chunk_keys(tokens, self.chunk_size, &self.spec.model_tag);
        let pt = self.spec.page_tokens;
        let mut missing = 0;
        let slots: Vec<PdBufferSlot> = keys
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let tc = (tokens.len() - i * self.chunk_size).min(self.chunk_size);
                let pages = tc.div_ceil(pt) * self.spec.num_layers;
                missing += pages;
                PdBufferSlot {
                    token_count: tc,
                    buf: vec![0u8; self.spec.chunk_bytes(tc)],
                    filled: vec![false; pages],
                    missing: pages,
                    state: SlotState::Awaiting,
                }
            })
            .collect();
        let n = slots.len();
        let mut q = self.queries.lock();
        if q.contains_key(&query) {
            return Err(PdError::AlreadyRegistered(query));
        }
        q.insert(
            query,
            Arc::new(Mutex::new(PdQuery {
                keys,
                slots,
                missing,
            })),
        );
        Ok(n)
    }

    pub fn is_registered(&self, query: QueryId) -> bool {
        self.queries.lock().contains_key(&query)
    }

    pub fn slot_states(&self, query: QueryId) -> Option<Vec<SlotState>> {
        let q = self.queries.lock().get(&query)?.clone();
        let q = q.lock();
        Some(q.slots.iter().map(|s| s.state).collect())
    }

    pub fn unregister(&self, query: QueryId) {
        self.queries.lock().remove(&query);
    }

    /// Copies one segment into its slot. Returns pages newly filled; pages
    /// already filled are left alone, so a repeated push is a no-op.
    pub fn apply(&self, seg: &Segment<'_>) -> Result<usize, PdError> {
        let mut off = 0;
        self.apply_with(&seg.header(), |dst| {
            dst.copy_from_slice(&seg.data[off..off + dst.len()]);
            off += dst.len();
            Ok(())
        })
    }

    /// Core of [`apply`](Self::apply): `fill` is called once per layer of
    /// the segment, in order, with the region that layer's bytes belong in.
    fn apply_with(
        &self,
        seg: &SegmentHeader,
        mut fill: impl FnMut(&mut [u8]) -> Result<(), PdError>,
    ) -> Result<usize, PdError> {
        let q = self
            .queries
            .lock()
            .get(&seg.query_id)
            .cloned()
            .ok_or(PdError::UnknownQuery(seg.query_id))?;
        let mut q = q.lock();
        let spec = &self.spec;
        let pt = spec.page_tokens;
        let bptl = spec.bytes_per_token_per_layer;
        let bad = |m: String| PdError::BadSegment(m);
        let slot = q
            .slots
            .get_mut(seg.ordinal as usize)
            .ok_or_else(|| bad(format!("ordinal {} out of range", seg.ordinal)))?;
        let (l0, nl) = (seg.layer_start as usize, seg.layer_count as usize);
        let (t0, nt) = (seg.token_offset as usize, seg.token_count as usize);
        let tc = slot.token_count;
        if l0 + nl > spec.num_layers || t0 + nt > tc || nt == 0 || nl == 0 {
            return Err(bad("segment outside chunk".into()));
        }
        if t0 % pt != 0 || (nt % pt != 0 && t0 + nt != tc) {
            return Err(bad("token range not page aligned".into()));
        }
        if seg.data_len as usize != nl * nt * bptl {
            return Err(bad(format!(
                "data length {} for {nl} layers x {nt} tokens",
                seg.data_len
            )));
        }
        let pages_per_layer = tc.div_ceil(pt);
        let pages = t0 / pt..(t0 + nt).div_ceil(pt);
        let mut new = 0;
        let mut scratch = Vec::new();
        for l in l0..l0 + nl {
            let base = l * tc * bptl;
            let flags = l * pages_per_layer + pages.start..l * pages_per_layer + pages.end;
            let region = base + t0 * bptl..base + (t0 + nt) * bptl;
            if slot.filled[flags.clone()].iter().all(|f| !f) {
                fill(&mut slot.buf[region])?;
            } else {
                // some pages already landed: keep them, take only the rest
                scratch.resize(nt * bptl, 0);
                fill(&mut scratch)?;
                for p in pages.clone() {
                    if !slot.filled[l * pages_per_layer + p] {
                        let a = p * pt;
                        let b = ((p + 1) * pt).min(tc);
                        slot.buf[base + a * bptl..base + b * bptl]
                            .copy_from_slice(&scratch[(a - t0) * bptl..(b - t0) * bptl]);
                    }
                }
            }
            for f in &mut slot.filled[flags] {
                if !*f {
                    *f = true;
                    slot.missing -= 1;
                    new += 1;
                }
            }
        }
        if slot.missing == 0 && slot.state == SlotState::Awaiting {
            slot.state = SlotState::Filled;
        }
        q.missing -= new;
        drop(q);
        if new > 0 {
            let _g = self.progress.lock();
            self.cv.notify_all();
        }
        Ok(new)
    }

    /// Waits until every chunk of `query` is filled and hands the chunks
    /// over in ordinal order. The query is unregistered afterwards.
    pub fn pd_await(&self, query: QueryId, timeout: Duration) -> Result<Vec<KVChunk>, PdError> {
        let q = self
            .queries
            .lock()
            .get(&query)
            .cloned()
            .ok_or(PdError::UnknownQuery(query))?;
        let deadline = Instant::now() + timeout;
        let mut g = self.progress.lock();
        loop {
            let missing = q.lock().missing;
            if missing == 0 {
                break;
            }
            if self.cv.wait_until(&mut g, deadline).timed_out() && q.lock().missing != 0 {
                return Err(PdError::Timeout { query, missing });
            }
        }
        drop(g);
        self.queries.lock().remove(&query);
        let mut q = q.lock();
        let keys = q.keys.clone();
        let mut out = Vec::with_capacity(keys.len());
        for (slot, key) in q.slots.iter_mut().zip(keys) {
            slot.state = SlotState::Consumed;
            let buf = std::mem::take(&mut slot.buf);
            out.push(
                KVChunk::seal(key, &self.spec, slot.token_count, Bytes::from(buf))
                    .map_err(|e| PdError::BadSegment(e.to_string()))?,
            );
        }
        Ok(out)
    }
}

impl Handler for PdReceiver {
    fn handle(&self, _conn: &Connection, req: Request<'_>) -> Reply {
        if req.opcode != Opcode::PdPush {
            return Reply::Err(
                ErrCode::Unsupported,
                format!("{} not served here", req.opcode),
            );
        }
        let mut r = Reader::new(req.payload);
        let mut total = 0u32;
        let res = (|| -> Result<(), PdError> {
            let n = r.u16().map_err(|e| PdError::BadSegment(e.to_string()))?;
            for _ in 0..n {
                let seg = Segment::read(&mut r).map_err(|e| PdError::BadSegment(e.to_string()))?;
                total += self.apply(&seg)? as u32;
            }
            r.finish().map_err(|e| PdError::BadSegment(e.to_string()))
        })();
        match res {
            Ok(()) => {
                let mut w = Writer::new();
                w.u32(total);
                Reply::Ok(w.finish())
            }
            Err(PdError::UnknownQuery(q)) => {
                Reply::Err(ErrCode::UnknownQuery, format!("unknown query {q}"))
            }
            Err(e) => Reply::Err(ErrCode::BadRequest, e.to_string()),
        }
    }

    fn streams(&self, opcode: Opcode) -> bool {
        opcode == Opcode::PdPush
    }

    /// Reads segment data straight from the socket into the slots.
    fn handle_stream(
        &self,
        _conn: &Connection,
        _op: Opcode,
        _id: u64,
        p: &mut Payload<'_>,
    ) -> Reply {
        let res = (|| -> Result<u32, PdError> {
            let n = u16::from_le_bytes(p.read_array::<2>()?);
            let mut total = 0u32;
            for _ in 0..n {
                let h = SegmentHeader::decode(&p.read_array::<SEGMENT_HEADER>()?);
                if h.data_len as usize > p.remaining() {
                    return Err(PdError::BadSegment("segment longer than payload".into()));
                }
                total += self.apply_with(&h, |dst| Ok(p.read_exact(dst)?))? as u32;
            }
            if p.remaining() != 0 {
                return Err(PdError::BadSegment("trailing bytes".into()));
            }
            Ok(total)
        })();
        match res {
            Ok(total) => Reply::Ok(total.to_le_bytes().to_vec()),
            Err(PdError::UnknownQuery(q)) => {
                Reply::Err(ErrCode::UnknownQuery, format!("unknown query {q}"))
            }
            Err(e) => Reply::Err(ErrCode::BadRequest, e.to_string()),
        }
    }
}

fn send_segments(conn: &Connection, segs: &[Segment<'_>]) -> Result<u32, PdError> {
    let heads: Vec<[u8; SEGMENT_HEADER]> = segs.iter().map(|s| s.header().encode()).collect();
    let count = (segs.len() as u16).to_le_bytes();
    let mut parts: Vec<&[u8]> = Vec::with_capacity(1 + 2 * segs.len());
    parts.push(&count);
    for (h, s) in heads.iter().zip(segs) {
        parts.push(h);
        parts.push(s.data);
    }
    match conn.request_parts(Opcode::PdPush, &parts) {
        Ok(resp) => Ok(Reader::new(&resp.payload)
            .u32()
            .map_err(|e| PdError::Transfer(e.into()))?),
        Err(TransferError::Remote {
            code: ErrCode::UnknownQuery,
            ..
        }) => Err(PdError::UnknownQuery(segs[0].query_id)),
        Err(e) => Err(e.into()),
    }
}

fn whole(query: QueryId, ordinal: u32, chunk: &KVChunk) -> Segment<'_> {
    Segment {
        query_id: query,
        ordinal,
        layer_start: 0,
        layer_count: chunk.num_layers() as u16,
        token_offset: 0,
        token_count: chunk.token_count() as u32,
        data: chunk.payload(),
    }
}

/// Pushes one whole chunk in one message.
pub fn pd_push(
    conn: &Connection,
    query: QueryId,
    ordinal: u32,
    chunk: &KVChunk,
) -> Result<(), PdError> {
    send_segments(conn, &[whole(query, ordinal, chunk)]).map(|_| ())
}

/// Pushes whole chunks, several per message up to `max_message` bytes.
/// Returns the number of messages sent.
pub fn push_chunks(
    conn: &Connection,
    query: QueryId,
    first_ordinal: u32,
    chunks: &[KVChunk],
    max_message: usize,
) -> Result<usize, PdError> {
    let limit = max_message
        .min(conn.max_payload())
        .saturating_sub(HEADER_LEN + 2);
    let mut batch: Vec<Segment<'_>> = Vec::new();
    let mut size = 0;
    let mut messages = 0;
    for (i, c) in chunks.iter().enumerate() {
        let seg = whole(query, first_ordinal + i as u32, c);
        let n = SEGMENT_HEADER + seg.data.len();
        if !batch.is_empty() && size + n > limit {
            send_segments(conn, &batch)?;
            messages += 1;
            batch.clear();
            size = 0;
        }
        batch.push(seg);
        size += n;
    }
    if !batch.is_empty() {
        send_segments(conn, &batch)?;
        messages += 1;
    }
    Ok(messages)
}

/// Page-granularity baseline: one message per (layer, page) of the chunk.
/// Returns the number of messages sent.
pub fn push_pages(
    conn: &Connection,
    query: QueryId,
    ordinal: u32,
    chunk: &KVChunk,
    page_tokens: usize,
) -> Result<usize, PdError> {
    let tc = chunk.token_count();
    let bptl = chunk.bytes_per_token_per_layer();
    let mut messages = 0;
    for l in 0..chunk.num_layers() {
        let layer = chunk.layer(l);
        for a in (0..tc).step_by(page_tokens) {
            let b = (a + page_tokens).min(tc);
            let seg = Segment {
                query_id: query,
                ordinal,
                layer_start: l as u16,
                layer_count: 1,
                token_offset: a as u32,
                token_count: (b - a) as u32,
                data: &layer[a * bptl..b * bptl],
            };
            send_segments(conn, &[seg])?;
            messages += 1;
        }
    }
    Ok(messages)
}
