//! Control plane: a manager keeps a token pool of which instance holds which
//! chunks, fed by store/evict events from per-instance workers, and
//! dispatches clear/pin/compress/move commands to those workers.

pub mod client;
pub mod manager;
pub mod pool;
pub mod proto;
pub mod router;
pub mod worker;

pub use client::ControllerClient;
pub use manager::{Manager, ManagerConfig};
pub use pool::{PoolEntry, TokenPool};
pub use router::route;
pub use worker::Worker;

use kvtier_transfer::TransferError;

pub type InstanceId = String;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ControllerError {
    #[error("unknown instance {0:?}")]
    UnknownInstance(InstanceId),
    #[error("worker {instance} failed: {message}")]
    Worker {
        instance: InstanceId,
        message: String,
    },
    #[error("malformed message: {0}")]
    Protocol(String),
    #[error(transparent)]
    Transfer(#[from] TransferError),
}

impl From<kvtier_transfer::body::BodyError> for ControllerError {
    fn from(e: kvtier_transfer::body::BodyError) -> Self {
        ControllerError::Protocol(e.to_string())
    }
}
