//! Loopback throughput measurement by message size.

use std::sync::Arc;
use std::time::Instant;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::body::Reader;
use crate::conn::{ConnConfig, Connection, Handler, NoHandler, Payload, Reply, Request};
use crate::server::{Server, ServerConfig};
use crate::wire::{ErrCode, Opcode};
use crate::TransferError;

/// Copies each message into a destination region at the offset it names,
/// standing in for a receiver writing into its KV buffer.
struct Sink {
    dst: Mutex<Vec<u8>>,
    direct: bool,
}

impl Handler for Sink {
    fn handle(&self, _conn: &Connection, req: Request<'_>) -> Reply {
        let mut r = Reader::new(req.payload);
        let Ok(off) = r.u64() else {
            return Reply::Err(ErrCode::BadRequest, "missing offset".into());
        };
        let data = &req.payload[8..];
        let mut dst = self.dst.lock();
        let off = off as usize;
        if off + data.len() > dst.len() {
            return Reply::Err(ErrCode::BadRequest, "outside destination".into());
        }
        dst[off..off + data.len()].copy_from_slice(data);
        Reply::empty()
    }

    fn streams(&self, _opcode: Opcode) -> bool {
        self.direct
    }

    fn handle_stream(
        &self,
        _conn: &Connection,
        _op: Opcode,
        _id: u64,
        p: &mut Payload<'_>,
    ) -> Reply {
        let Ok(off) = p.read_array::<8>() else {
            return Reply::Err(ErrCode::BadRequest, "missing offset".into());
        };
        let off = u64::from_le_bytes(off) as usize;
        let n = p.remaining();
        let mut dst = self.dst.lock();
        if off + n > dst.len() {
            return Reply::Err(ErrCode::BadRequest, "outside destination".into());
        }
        match p.read_exact(&mut dst[off..off + n]) {
            Ok(()) => Reply::empty(),
            Err(e) => Reply::Err(ErrCode::Internal, e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThroughputSample {
    pub message_bytes: usize,
    pub total_bytes: usize,
    pub messages: usize,
    /// Per-trial throughput in bytes per second.
    pub trials: Vec<f64>,
}

impl ThroughputSample {
    /// Best trial: the least-disturbed run on a shared machine.
    pub fn best(&self) -> f64 {
        self.trials.iter().copied().fold(0.0, f64::max)
    }

    pub fn median(&self) -> f64 {
        let mut t = self.trials.clone();
        t.sort_by(|a, b| a.total_cmp(b));
        t.get(t.len() / 2).copied().unwrap_or(0.0)
    }
}

/// Loopback rig with one source and one destination buffer of `total`
/// bytes, reused across message sizes.
pub struct Loopback {
    server: Server,
    conn: Connection,
    sink: Arc<Sink>,
    src: Vec<u8>,
}

impl Loopback {
    /// `direct` lets the receiver read payloads straight into the
    /// destination instead of through a staging buffer.
    pub fn new(total: usize, direct: bool) -> Result<Self, TransferError> {
        Self::with_config(total, direct, ConnConfig::default())
    }

    pub fn with_config(
        total: usize,
        direct: bool,
        conn: ConnConfig,
    ) -> Result<Self, TransferError> {
        let sink = Arc::new(Sink {
            dst: Mutex::new(vec![0u8; total]),
            direct,
        });
        let server = Server::bind(
            "127.0.0.1:0",
            sink.clone(),
            ServerConfig {
                conn,
                ..Default::default()
            },
        )?;
        let conn = Connection::connect_with(server.local_addr(), Arc::new(NoHandler), conn)?;
        let mut src = vec![0u8; total];
        let mut x = 0x9e37_79b9_7f4a_7c15u64;
        for c in src.chunks_mut(8) {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            c.copy_from_slice(&x.to_le_bytes()[..c.len()]);
        }
        Ok(Self {
            server,
            conn,
            sink,
            src,
        })
    }

    /// Sends the whole source as `message_bytes`-sized messages, each
    /// acknowledged before the next is sent. Returns bytes per second.
    pub fn run(&self, message_bytes: usize) -> Result<f64, TransferError> {
        let total = self.src.len();
        let start = Instant::now();
        let mut off = 0;
        while off < total {
            let end = (off + message_bytes).min(total);
            let o = (off as u64).to_le_bytes();
            self.conn
                .request_parts(Opcode::Put, &[&o, &self.src[off..end]])?;
            off = end;
        }
        Ok(total as f64 / start.elapsed().as_secs_f64())
    }

    /// Whether the destination matches the source byte for byte.
    pub fn verify(&self) -> bool {
        *self.sink.dst.lock() == self.src
    }

    pub fn measure(
        &self,
        sizes: &[usize],
        trials: usize,
    ) -> Result<Vec<ThroughputSample>, TransferError> {
        let mut out: Vec<ThroughputSample> = sizes
            .iter()
            .map(|&s| ThroughputSample {
                message_bytes: s,
                total_bytes: self.src.len(),
                messages: self.src.len().div_ceil(s),
                trials: Vec::new(),
            })
            .collect();
        // interleave sizes so slow phases of the machine hit all of them
        for _ in 0..trials {
            for s in out.iter_mut() {
                s.trials.push(self.run(s.message_bytes)?);
            }
        }
        Ok(out)
    }

    pub fn server(&self) -> &Server {
        &self.server
    }
}
