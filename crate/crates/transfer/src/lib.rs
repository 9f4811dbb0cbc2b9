//! Binary wire protocol and TCP transport: remote store tier, standalone
//! store server, and prefill-to-decode KV push.

pub mod bench;
pub mod body;
pub mod conn;
pub mod pd;
pub mod remote;
pub mod server;
pub mod wire;

pub use conn::{ConnConfig, Connection, Handler, NoHandler, Reply, Request, Router};
pub use pd::{pd_push, push_chunks, push_pages, PdError, PdReceiver};
pub use remote::{ChunkStatus, RemoteClient, RemoteTier};
pub use server::{serve, Server, ServerConfig, StoreHandler};
pub use wire::{ErrCode, Frame, FrameError, Opcode};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransferError {
    #[error("i/o: {0}")]
    Io(String),
    #[error("connection closed")]
    Closed,
    #[error("request timed out")]
    Timeout,
    #[error("payload of {len} bytes exceeds limit {max}")]
    TooLarge { len: usize, max: usize },
    #[error("peer error {code:?}: {message}")]
    Remote { code: ErrCode, message: String },
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("protocol: {0}")]
    Protocol(String),
}

impl From<std::io::Error> for TransferError {
    fn from(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::UnexpectedEof
            | std::io::ErrorKind::ConnectionReset
            | std::io::ErrorKind::BrokenPipe
            | std::io::ErrorKind::NotConnected => TransferError::Closed,
            _ => TransferError::Io(e.to_string()),
        }
    }
}

impl From<body::BodyError> for TransferError {
    fn from(e: body::BodyError) -> Self {
        TransferError::Protocol(e.to_string())
    }
}
