use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::token::ChunkKey;

/// Storage level. The derived order is the speed order: RAM before disk
/// before any remote.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TierId {
    RamPool,
    LocalDisk,
    Remote(Arc<str>),
}

impl TierId {
    pub fn remote(name: &str) -> Self {
        TierId::Remote(Arc::from(name))
    }

    pub fn is_remote(&self) -> bool {
        matches!(self, TierId::Remote(_))
    }
}

impl fmt::Display for TierId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TierId::RamPool => f.write_str("ram"),
            TierId::LocalDisk => f.write_str("disk"),
            TierId::Remote(n) => write!(f, "remote:{n}"),
        }
    }
}

impl FromStr for TierId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ram" | "cpu" | "RamPool" => Ok(TierId::RamPool),
            "disk" | "LocalDisk" => Ok(TierId::LocalDisk),
            _ => match s.strip_prefix("remote:") {
                Some(name) if !name.is_empty() => Ok(TierId::remote(name)),
                _ => Err(format!(
                    "unknown tier {s:?} (expected ram, disk or remote:<name>)"
                )),
            },
        }
    }
}

impl Serialize for TierId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TierId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Simulated device speed: fixed latency plus bytes over bandwidth. Applied
/// as a real sleep around tier I/O and reused to model durations in
/// virtual time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TierSpeed {
    #[serde(default)]
    pub latency_us: u64,
    /// `None` or zero means unthrottled.
    #[serde(default)]
    pub bytes_per_sec: Option<f64>,
}

impl TierSpeed {
    pub const UNTHROTTLED: TierSpeed = TierSpeed {
        latency_us: 0,
        bytes_per_sec: None,
    };

    pub fn new(latency_us: u64, bytes_per_sec: f64) -> Self {
        Self {
            latency_us,
            bytes_per_sec: Some(bytes_per_sec),
        }
    }

    pub fn delay(&self, len: usize) -> Duration {
        let bw = match self.bytes_per_sec {
            Some(b) if b > 0.0 => Duration::from_secs_f64(len as f64 / b),
            _ => Duration::ZERO,
        };
        Duration::from_micros(self.latency_us) + bw
    }

    pub fn is_throttled(&self) -> bool {
        self.latency_us > 0 || self.bytes_per_sec.is_some_and(|b| b > 0.0)
    }

    pub fn throttle(&self, len: usize) {
        let d = self.delay(len);
        if !d.is_zero() {
            std::thread::sleep(d);
        }
    }
}

/// Shape of a chunk, stored alongside its bytes in every tier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkMeta {
    pub key: ChunkKey,
    pub token_count: usize,
    pub num_layers: usize,
    pub bytes_per_token_per_layer: usize,
}

impl ChunkMeta {
    pub fn raw_len(&self) -> usize {
        self.token_count * self.num_layers * self.bytes_per_token_per_layer
    }

    pub fn layer_len(&self) -> usize {
        self.token_count * self.bytes_per_token_per_layer
    }
}

/// Chunk bytes as held by a tier, possibly codec-encoded.
#[derive(Debug, Clone)]
pub struct StoredBlob {
    pub meta: ChunkMeta,
    pub codec: Codec,
    pub data: Bytes,
    /// Checksum of `data` as stored.
    pub checksum: u64,
}

impl StoredBlob {
    pub fn verify(&self) -> bool {
        crate::checksum(&self.data) == self.checksum
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum TierError {
    #[error("tier is full")]
    Full,
    #[error("chunk not found in tier")]
    NotFound,
    #[error("chunk of {len} bytes exceeds slot size {slot}")]
    TooLarge { len: usize, slot: usize },
    #[error("corrupt chunk data: {0}")]
    Corrupt(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for TierError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            TierError::NotFound
        } else {
            TierError::Io(e.to_string())
        }
    }
}

/// One storage device behind the engine's index.
///
/// The engine does all capacity accounting and eviction; a backend only moves
/// bytes. `offset` is whatever the backend returned from `write`.
pub trait TierBackend: Send + Sync {
    fn id(&self) -> TierId;

    /// Byte capacity, or `None` when the device manages its own space.
    fn capacity(&self) -> Option<u64>;

    /// Bytes charged against capacity for storing `len` encoded bytes.
    fn charge(&self, len: usize) -> u64 {
        len as u64
    }

    fn write(&self, blob: &StoredBlob) -> Result<u64, TierError>;

    fn read(&self, meta: &ChunkMeta, offset: u64) -> Result<StoredBlob, TierError>;

    /// Copies `range` of the stored bytes into `dst`. Only meaningful for
    /// identity-coded data.
    fn read_range(
        &self,
        meta: &ChunkMeta,
        offset: u64,
        range: Range<usize>,
        dst: &mut [u8],
    ) -> Result<(), TierError> {
        let blob = self.read(meta, offset)?;
        let src = blob
            .data
            .get(range)
            .ok_or_else(|| TierError::Corrupt("range outside stored chunk".into()))?;
        dst.copy_from_slice(src);
        Ok(())
    }

    fn remove(&self, meta: &ChunkMeta, offset: u64) -> Result<(), TierError>;

    /// Whether a read of this tier can be trusted without re-verifying the
    /// checksum (process-local memory).
    fn trusted(&self) -> bool {
        false
    }

    /// Whether other processes may add chunks to this tier behind the
    /// engine's back (a shared remote store).
    fn external(&self) -> bool {
        false
    }

    /// Asks the device which of `keys` it holds.
    fn probe(&self, keys: &[ChunkKey]) -> Result<Vec<Option<Probe>>, TierError> {
        Ok(vec![None; keys.len()])
    }
}

/// What a device reports about a chunk it holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub offset: u64,
    pub stored_len: usize,
    pub token_count: usize,
    pub codec: Codec,
}
