//! Symmetric framed connection over TCP.
//!
//! Either side may send requests. A reader thread routes replies to the
//! waiting caller by request id and hands requests to a [`Handler`]. Many
//! requests may be in flight on one connection; replies can arrive in any
//! order.

use std::collections::HashMap;
use std::io::{self, IoSlice, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use kvtier_core::Completion;
use parking_lot::Mutex;

use crate::body::{Reader, Writer};
use crate::wire::{ErrCode, FrameError, Header, Opcode, DEFAULT_MAX_PAYLOAD, HEADER_LEN};
use crate::TransferError;

/// How a handler answers a request.
#[derive(Debug)]
pub enum Reply {
    Ok(Vec<u8>),
    Err(ErrCode, String),
    /// The handler will answer later through [`Connection::reply`].
    Deferred,
}

impl Reply {
    pub fn empty() -> Self {
        Reply::Ok(Vec::new())
    }
}

pub struct Request<'a> {
    pub opcode: Opcode,
    pub request_id: u64,
    pub payload: &'a [u8],
}

pub trait Handler: Send + Sync + 'static {
    fn handle(&self, conn: &Connection, req: Request<'_>) -> Reply;

    /// Opt in to reading `opcode` payloads straight off the socket through
    /// [`handle_stream`](Self::handle_stream) instead of a staging buffer.
    fn streams(&self, _opcode: Opcode) -> bool {
        false
    }

    /// Consumes the payload from `payload`. Bytes left unread are skipped.
    fn handle_stream(
        &self,
        _conn: &Connection,
        opcode: Opcode,
        _request_id: u64,
        _payload: &mut Payload<'_>,
    ) -> Reply {
        Reply::Err(ErrCode::Unsupported, format!("{opcode} not served here"))
    }

    fn on_close(&self, _conn: &Connection) {}
}

/// Payload bytes still on the socket.
pub struct Payload<'a> {
    stream: &'a mut TcpStream,
    remaining: usize,
    error: Option<io::Error>,
}

impl Payload<'_> {
    pub fn remaining(&self) -> usize {
        self.remaining
    }

    /// Fills `dst` from the payload. Fails if the payload is shorter or
    /// the socket fails; the connection is closed in the latter case.
    pub fn read_exact(&mut self, dst: &mut [u8]) -> Result<(), TransferError> {
        if dst.len() > self.remaining {
            return Err(TransferError::Protocol("read past end of payload".into()));
        }
        if self.error.is_some() {
            return Err(TransferError::Closed);
        }
        match self.stream.read_exact(dst) {
            Ok(()) => {
                self.remaining -= dst.len();
                Ok(())
            }
            Err(e) => {
                self.error = Some(e);
                Err(TransferError::Closed)
            }
        }
    }

    pub fn read_array<const N: usize>(&mut self) -> Result<[u8; N], TransferError> {
        let mut b = [0u8; N];
        self.read_exact(&mut b)?;
        Ok(b)
    }

    pub fn read_vec(&mut self, n: usize) -> Result<Vec<u8>, TransferError> {
        let mut v = vec![0u8; n];
        self.read_exact(&mut v)?;
        Ok(v)
    }

    fn finish(mut self) -> io::Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        skip(self.stream, self.remaining)
    }
}

/// Rejects every request.
pub struct NoHandler;

impl Handler for NoHandler {
    fn handle(&self, _conn: &Connection, req: Request<'_>) -> Reply {
        Reply::Err(
            ErrCode::Unsupported,
            format!("{} not served here", req.opcode),
        )
    }
}

/// Reply payload with its opcode already checked.
#[derive(Debug, Clone)]
pub struct Response {
    pub payload: Vec<u8>,
}

type Pending = Completion<Result<Response, TransferError>>;

#[derive(Debug, Clone, Copy)]
pub struct ConnConfig {
    pub max_payload: usize,
    pub request_timeout: Duration,
    /// Kernel send/receive buffer size; `None` keeps the OS autotuning.
    pub socket_buffer: Option<usize>,
}

impl Default for ConnConfig {
    fn default() -> Self {
        Self {
            max_payload: DEFAULT_MAX_PAYLOAD,
            request_timeout: Duration::from_secs(120),
            socket_buffer: None,
        }
    }
}

struct Inner {
    writer: Mutex<TcpStream>,
    control: TcpStream,
    pending: Mutex<HashMap<u64, Pending>>,
    next_id: AtomicU64,
    closed: AtomicBool,
    peer: SocketAddr,
    config: ConnConfig,
    sent: AtomicU64,
    received: AtomicU64,
}

#[derive(Clone)]
pub struct Connection {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection")
            .field("peer", &self.inner.peer)
            .finish()
    }
}

impl Connection {
    pub fn connect(
        addr: impl ToSocketAddrs,
        handler: Arc<dyn Handler>,
    ) -> Result<Self, TransferError> {
        Self::connect_with(addr, handler, ConnConfig::default())
    }

    pub fn connect_with(
        addr: impl ToSocketAddrs,
        handler: Arc<dyn Handler>,
        config: ConnConfig,
    ) -> Result<Self, TransferError> {
        let stream = TcpStream::connect(addr)?;
        Self::from_stream(stream, handler, config)
    }

    pub fn from_stream(
        stream: TcpStream,
        handler: Arc<dyn Handler>,
        config: ConnConfig,
    ) -> Result<Self, TransferError> {
        stream.set_nodelay(true)?;
        if let Some(n) = config.socket_buffer {
            let s = socket2::SockRef::from(&stream);
            s.set_send_buffer_size(n)?;
            s.set_recv_buffer_size(n)?;
        }
        let peer = stream.peer_addr()?;
        let read_half = stream.try_clone()?;
        let control = stream.try_clone()?;
        let conn = Connection {
            inner: Arc::new(Inner {
                writer: Mutex::new(stream),
                control,
                pending: Mutex::new(HashMap::new()),
                next_id: AtomicU64::new(1),
                closed: AtomicBool::new(false),
                peer,
                config,
                sent: AtomicU64::new(0),
                received: AtomicU64::new(0),
            }),
        };
        let c = conn.clone();
        std::thread::Builder::new()
            .name(format!("wire-{peer}"))
            .spawn(move || c.read_loop(read_half, handler))?;
        Ok(conn)
    }

    pub fn peer(&self) -> SocketAddr {
        self.inner.peer
    }

    pub fn is_closed(&self) -> bool {
        self.inner.closed.load(Ordering::Acquire)
    }

    pub fn bytes_sent(&self) -> u64 {
        self.inner.sent.load(Ordering::Relaxed)
    }

    pub fn bytes_received(&self) -> u64 {
        self.inner.received.load(Ordering::Relaxed)
    }

    pub fn max_payload(&self) -> usize {
        self.inner.config.max_payload
    }

    pub fn close(&self) {
        self.inner.closed.store(true, Ordering::Release);
        let _ = self.inner.control.shutdown(Shutdown::Both);
    }

    /// Sends a request built from `parts` (concatenated, not copied) and
    /// returns a handle for the reply.
    pub fn send_request(&self, opcode: Opcode, parts: &[&[u8]]) -> Result<Pending, TransferError> {
        let len: usize = parts.iter().map(|p| p.len()).sum();
        if len > self.inner.config.max_payload {
            return Err(TransferError::TooLarge {
                len,
                max: self.inner.config.max_payload,
            });
        }
        if self.is_closed() {
            return Err(TransferError::Closed);
        }
        let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
        let done = Completion::new();
        self.inner.pending.lock().insert(id, done.clone());
        if let Err(e) = self.write_frame(opcode, id, parts) {
            self.inner.pending.lock().remove(&id);
            return Err(e);
        }
        // the reader may have failed everything between insert and write
        if self.is_closed() {
            done.complete(Err(TransferError::Closed));
        }
        Ok(done)
    }

    /// Request and wait for the reply. `ERR` replies become
    /// [`TransferError::Remote`].
    pub fn request(&self, opcode: Opcode, payload: &[u8]) -> Result<Response, TransferError> {
        self.request_parts(opcode, &[payload])
    }

    pub fn request_parts(
        &self,
        opcode: Opcode,
        parts: &[&[u8]],
    ) -> Result<Response, TransferError> {
        let p = self.send_request(opcode, parts)?;
        self.wait(&p)
    }

    pub fn wait(&self, p: &Pending) -> Result<Response, TransferError> {
        p.wait_timeout(self.inner.config.request_timeout)
            .unwrap_or(Err(TransferError::Timeout))
    }

    /// Answers a deferred request.
    pub fn reply(&self, request_id: u64, reply: Reply) {
        let r = match reply {
            Reply::Ok(p) => self.write_frame(Opcode::Ok, request_id, &[&p]),
            Reply::Err(code, msg) => {
                let mut w = Writer::new();
                w.u16(code as u16).str(&msg);
                self.write_frame(Opcode::Err, request_id, &[&w.finish()])
            }
            Reply::Deferred => Ok(()),
        };
        if let Err(e) = r {
            tracing::debug!(peer = %self.inner.peer, ?e, "reply dropped");
        }
    }

    fn write_frame(&self, opcode: Opcode, id: u64, parts: &[&[u8]]) -> Result<(), TransferError> {
        let len: usize = parts.iter().map(|p| p.len()).sum();
        let header = Header {
            opcode,
            request_id: id,
            len: len as u32,
        }
        .encode();
        let mut w = self.inner.writer.lock();
        let mut slices: Vec<&[u8]> = Vec::with_capacity(parts.len() + 1);
        slices.push(&header);
        slices.extend(parts.iter().copied().filter(|p| !p.is_empty()));
        write_all_vectored(&mut *w, &slices).map_err(|e| {
            self.inner.closed.store(true, Ordering::Release);
            TransferError::from(e)
        })?;
        self.inner
            .sent
            .fetch_add((HEADER_LEN + len) as u64, Ordering::Relaxed);
        Ok(())
    }

    fn read_loop(self, mut stream: TcpStream, handler: Arc<dyn Handler>) {
        let mut buf: Vec<u8> = Vec::new();
        let reason = loop {
            let mut h = [0u8; HEADER_LEN];
            if let Err(e) = stream.read_exact(&mut h) {
                break TransferError::from(e);
            }
            let header = match Header::decode(&h) {
                Ok(h) => h,
                Err(e) => {
                    tracing::warn!(peer = %self.inner.peer, error = %e, "closing connection");
                    break TransferError::Frame(e);
                }
            };
            let len = header.len as usize;
            self.inner
                .received
                .fetch_add((HEADER_LEN + len) as u64, Ordering::Relaxed);
            if len > self.inner.config.max_payload {
                if let Err(e) = skip(&mut stream, len) {
                    break TransferError::from(e);
                }
                let err = FrameError::TooLarge {
                    len: header.len,
                    max: self.inner.config.max_payload,
                };
                if header.opcode.is_reply() {
                    self.resolve(header.request_id, Err(TransferError::Frame(err)));
                } else {
                    self.reply(
                        header.request_id,
                        Reply::Err(ErrCode::TooLarge, err.to_string()),
                    );
                }
                continue;
            }
            if !header.opcode.is_reply() && handler.streams(header.opcode) {
                let mut p = Payload {
                    stream: &mut stream,
                    remaining: len,
                    error: None,
                };
                let reply = handler.handle_stream(&self, header.opcode, header.request_id, &mut p);
                if let Err(e) = p.finish() {
                    break TransferError::from(e);
                }
                self.reply(header.request_id, reply);
                continue;
            }
            buf.resize(len, 0);
            if let Err(e) = stream.read_exact(&mut buf) {
                break TransferError::from(e);
            }
            match header.opcode {
                Opcode::Ok => self.resolve(
                    header.request_id,
                    Ok(Response {
                        payload: buf.clone(),
                    }),
                ),
                Opcode::Err => {
                    let mut r = Reader::new(&buf);
                    let err = match (r.u16(), r.str()) {
                        (Ok(code), Ok(msg)) => TransferError::Remote {
                            code: ErrCode::from_u16(code),
                            message: msg.to_string(),
                        },
                        _ => TransferError::Protocol("malformed ERR payload".into()),
                    };
                    self.resolve(header.request_id, Err(err));
                }
                opcode => {
                    let reply = handler.handle(
                        &self,
                        Request {
                            opcode,
                            request_id: header.request_id,
                            payload: &buf,
                        },
                    );
                    self.reply(header.request_id, reply);
                }
            }
            // don't pin a huge buffer after a one-off large message
            if buf.capacity() > (32 << 20) {
                buf = Vec::new();
            }
        };
        tracing::debug!(peer = %self.inner.peer, %reason, "connection reader exiting");
        self.inner.closed.store(true, Ordering::Release);
        let _ = self.inner.control.shutdown(Shutdown::Both);
        let pending: Vec<Pending> = self.inner.pending.lock().drain().map(|(_, p)| p).collect();
        for p in pending {
            p.complete(Err(TransferError::Closed));
        }
        handler.on_close(&self);
    }

    fn resolve(&self, id: u64, r: Result<Response, TransferError>) {
        if let Some(p) = self.inner.pending.lock().remove(&id) {
            p.complete(r);
        } else {
            tracing::debug!(id, "reply for unknown request");
        }
    }
}

fn skip(stream: &mut TcpStream, mut n: usize) -> io::Result<()> {
    let mut sink = [0u8; 64 << 10];
    while n > 0 {
        let k = n.min(sink.len());
        stream.read_exact(&mut sink[..k])?;
        n -= k;
    }
    Ok(())
}

fn write_all_vectored(w: &mut impl Write, parts: &[&[u8]]) -> io::Result<()> {
    let mut idx = 0;
    let mut off = 0;
    while idx < parts.len() {
        let mut slices: Vec<IoSlice<'_>> = Vec::with_capacity(parts.len() - idx);
        slices.push(IoSlice::new(&parts[idx][off..]));
        slices.extend(parts[idx + 1..].iter().map(|p| IoSlice::new(p)));
        let mut n = match w.write_vectored(&slices) {
            Ok(0) => return Err(io::ErrorKind::WriteZero.into()),
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        };
        while idx < parts.len() && n >= parts[idx].len() - off {
            n -= parts[idx].len() - off;
            idx += 1;
            off = 0;
        }
        off += n;
    }
    Ok(())
}

/// Routes requests to per-opcode handlers.
#[derive(Default)]
pub struct Router {
    routes: HashMap<Opcode, Arc<dyn Handler>>,
    closers: Vec<Arc<dyn Handler>>,
}

impl Router {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn route(mut self, ops: &[Opcode], h: Arc<dyn Handler>) -> Self {
        for op in ops {
            self.routes.insert(*op, h.clone());
        }
        self.closers.push(h);
        self
    }
}

impl Handler for Router {
    fn handle(&self, conn: &Connection, req: Request<'_>) -> Reply {
        match self.routes.get(&req.opcode) {
            Some(h) => h.handle(conn, req),
            None => NoHandler.handle(conn, req),
        }
    }

    fn streams(&self, opcode: Opcode) -> bool {
        self.routes.get(&opcode).is_some_and(|h| h.streams(opcode))
    }

    fn handle_stream(
        &self,
        conn: &Connection,
        opcode: Opcode,
        request_id: u64,
        payload: &mut Payload<'_>,
    ) -> Reply {
        match self.routes.get(&opcode) {
            Some(h) => h.handle_stream(conn, opcode, request_id, payload),
            None => Reply::Err(ErrCode::Unsupported, format!("{opcode} not served here")),
        }
    }

    fn on_close(&self, conn: &Connection) {
        for h in &self.closers {
            h.on_close(conn);
        }
    }
}
