//! Prefill on one engine, decode on another, KV shipped over a loopback
//! connection.

use std::sync::Arc;
use std::time::{Duration, Instant};

use kvtier_core::{KVChunk, ModelSpec, QueryId, TierSpeed};
use kvtier_transfer::conn::{Connection, NoHandler};
use kvtier_transfer::pd::{push_chunks, push_pages, PdError, PdReceiver};
use kvtier_transfer::server::{Server, ServerConfig};
use kvtier_transfer::TransferError;
use serde::{Deserialize, Serialize};

use crate::clock::Lane;
use crate::engine::{Engine, EngineError, QueryOutput, SimQuery};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PushMode {
    /// Whole chunks, packed into messages of up to `max_message` bytes.
    Chunk,
    /// One acknowledged message per layer and page.
    Page,
}

#[derive(Debug, thiserror::Error)]
pub enum PdRunError {
    #[error("engines must share one clock")]
    ClockMismatch,
    #[error("prefiller kept no KV for query {0}")]
    NoExport(QueryId),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Pd(#[from] PdError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
}

/// Decoder-side receiver plus the prefiller's connection to it.
pub struct PdLink {
    receiver: Arc<PdReceiver>,
    server: Server,
    conn: Connection,
    chunk_size: usize,
    page_tokens: usize,
    pub mode: PushMode,
    pub max_message: usize,
    /// Link model charged in virtual time, per message plus per byte.
    pub speed: TierSpeed,
    pub timeout: Duration,
}

impl PdLink {
    pub fn new(spec: ModelSpec, chunk_size: usize, mode: PushMode) -> Result<Self, TransferError> {
        let page_tokens = spec.page_tokens;
        let receiver = PdReceiver::new(spec, chunk_size);
        let server = Server::bind("127.0.0.1:0", receiver.clone(), ServerConfig::default())?;
        let conn = Connection::connect(server.local_addr(), Arc::new(NoHandler))?;
        Ok(Self {
            receiver,
            server,
            conn,
            chunk_size,
            page_tokens,
            mode,
            max_message: 8 << 20,
            speed: TierSpeed {
                latency_us: 20,
                bytes_per_sec: Some(12.5e9),
            },
            timeout: Duration::from_secs(60),
        })
    }

    pub fn receiver(&self) -> &Arc<PdReceiver> {
        &self.receiver
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    /// Sends `chunks` of `query`; returns the message count.
    pub fn push(&self, query: QueryId, chunks: &[KVChunk]) -> Result<usize, PdError> {
        match self.mode {
            PushMode::Chunk => push_chunks(&self.conn, query, 0, chunks, self.max_message),
            PushMode::Page => {
                let mut n = 0;
                for (i, c) in chunks.iter().enumerate() {
                    n += push_pages(&self.conn, query, i as u32, c, self.page_tokens)?;
                }
                Ok(n)
            }
        }
    }

    /// Modeled time for `messages` messages carrying `bytes` in total.
    pub fn model_time(&self, messages: usize, bytes: usize) -> Duration {
        self.speed.delay(bytes) + self.speed.delay(0) * messages.saturating_sub(1) as u32
    }
}

/// One query's trip through a prefiller and a decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdRecord {
    pub id: QueryId,
    pub prompt_tokens: usize,
    pub arrival: Duration,
    pub prefill_done: Duration,
    pub received: Duration,
    pub first_token: Duration,
    pub finish: Duration,
    pub itl: Vec<Duration>,
    /// Prompt tokens the prefiller found in its own cache.
    pub matched: usize,
    pub reused: usize,
    pub messages: usize,
    pub bytes: usize,
    /// Wall time of the push itself.
    pub push_wall: Duration,
    pub output: QueryOutput,
}

impl PdRecord {
    pub fn prefill(&self) -> Duration {
        self.prefill_done.saturating_sub(self.arrival)
    }

    pub fn transfer(&self) -> Duration {
        self.received.saturating_sub(self.prefill_done)
    }

    pub fn decode(&self) -> Duration {
        self.finish.saturating_sub(self.received)
    }

    pub fn end_to_end(&self) -> Duration {
        self.finish.saturating_sub(self.arrival)
    }

    pub fn ttft(&self) -> Duration {
        self.first_token.saturating_sub(self.arrival)
    }
}

/// Prefills `q` on `prefiller`, pushes its chunks over `link` and decodes
/// on `decoder`. Both engines must run on the same clock.
pub fn run_pd(
    q: SimQuery,
    prefiller: &mut Engine,
    decoder: &mut Engine,
    link: &PdLink,
) -> Result<PdRecord, PdRunError> {
    if !Arc::ptr_eq(prefiller.clock(), decoder.clock()) {
        return Err(PdRunError::ClockMismatch);
    }
    let clock = prefiller.clock().clone();
    // slots exist before any byte is pushed
    link.receiver.register(q.id, &q.tokens)?;
    let res = pd_inner(q.clone(), prefiller, decoder, link, &clock);
    if res.is_err() {
        link.receiver.unregister(q.id);
    }
    res
}

fn pd_inner(
    q: SimQuery,
    prefiller: &mut Engine,
    decoder: &mut Engine,
    link: &PdLink,
    clock: &crate::clock::Clock,
) -> Result<PdRecord, PdRunError> {
    prefiller.export_on_finish(q.id, link.chunk_size);
    let pre = prefiller.run_query(SimQuery {
        max_output: 0,
        ..q.clone()
    })?;
    let chunks = prefiller
        .take_export(q.id)
        .ok_or(PdRunError::NoExport(q.id))?;
    let prefill_done = clock.now();

    let bytes: usize = chunks.iter().map(KVChunk::len).sum();
    let t = Instant::now();
    let messages = link.push(q.id, &chunks)?;
    let received_chunks = link.receiver.pd_await(q.id, link.timeout)?;
    let push_wall = t.elapsed();
    if clock.is_virtual() {
        let end = clock.io(Lane::Link, link.model_time(messages, bytes));
        clock.wait_until(end);
    }
    let received = clock.now();

    let dec = decoder.resume(
        SimQuery {
            arrival: received,
            ..q.clone()
        },
        &received_chunks,
    )?;
    Ok(PdRecord {
        id: q.id,
        prompt_tokens: q.tokens.len(),
        arrival: pre.arrival,
        prefill_done,
        received,
        first_token: dec.first_token,
        finish: dec.finish,
        itl: dec.itl,
        matched: pre.matched,
        reused: pre.reused,
        messages,
        bytes,
        push_wall,
        output: dec.output,
    })
}
