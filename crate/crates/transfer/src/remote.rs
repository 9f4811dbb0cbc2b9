//! Client side of the store protocol, and a [`TierBackend`] that keeps
//! chunks on a remote store server.

use std::net::ToSocketAddrs;
use std::sync::Arc;

use kvtier_core::codec::Codec;
use kvtier_core::storage::{
    ChunkMeta, ClearReport, Probe, StoredBlob, TierBackend, TierError, TierId,
};
use kvtier_core::{ChunkKey, KVChunk};

use crate::body::{read_blob, write_blob_header, Reader, Writer};
use crate::conn::{ConnConfig, Connection, NoHandler};
use crate::server::status;
use crate::wire::{Opcode, HEADER_LEN};
use crate::TransferError;

/// Per-chunk result of a PUT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkStatus {
    Stored,
    AlreadyPresent,
    Failed,
    Corrupt,
}

impl ChunkStatus {
    fn from_u8(b: u8) -> Self {
        match b {
            status::STORED => ChunkStatus::Stored,
            status::PRESENT => ChunkStatus::AlreadyPresent,
            status::CORRUPT => ChunkStatus::Corrupt,
            _ => ChunkStatus::Failed,
        }
    }

    pub fn is_ok(self) -> bool {
        matches!(self, ChunkStatus::Stored | ChunkStatus::AlreadyPresent)
    }
}

#[derive(Clone, Debug)]
pub struct RemoteClient {
    conn: Connection,
}

fn identity_blob(c: &KVChunk) -> StoredBlob {
    StoredBlob {
        meta: ChunkMeta {
            key: c.key().clone(),
            token_count: c.token_count(),
            num_layers: c.num_layers(),
            bytes_per_token_per_layer: c.bytes_per_token_per_layer(),
        },
        codec: Codec::Identity,
        checksum: c.checksum(),
        data: c.payload().clone(),
    }
}

fn put_prefix(pin: bool, tiers: &[TierId], count: usize) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(pin as u8).u8(tiers.len() as u8);
    for t in tiers {
        w.str(&t.to_string());
    }
    w.u32(count as u32);
    w.finish()
}

impl RemoteClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, TransferError> {
        Ok(Self {
            conn: Connection::connect(addr, Arc::new(NoHandler))?,
        })
    }

    pub fn connect_with(
        addr: impl ToSocketAddrs,
        config: ConnConfig,
    ) -> Result<Self, TransferError> {
        Ok(Self {
            conn: Connection::connect_with(addr, Arc::new(NoHandler), config)?,
        })
    }

    pub fn from_connection(conn: Connection) -> Self {
        Self { conn }
    }

    pub fn connection(&self) -> &Connection {
        &self.conn
    }

    fn put_blobs(
        &self,
        blobs: &[&StoredBlob],
        tiers: &[TierId],
        pin: bool,
    ) -> Result<Vec<ChunkStatus>, TransferError> {
        let prefix = put_prefix(pin, tiers, blobs.len());
        let heads: Vec<Vec<u8>> = blobs
            .iter()
            .map(|b| {
                let mut w = Writer::new();
                write_blob_header(&mut w, b);
                w.finish()
            })
            .collect();
        let mut parts: Vec<&[u8]> = vec![&prefix];
        for (h, b) in heads.iter().zip(blobs) {
            parts.push(h);
            parts.push(&b.data);
        }
        let resp = self.conn.request_parts(Opcode::Put, &parts)?;
        let mut r = Reader::new(&resp.payload);
        let n = r.count(1)?;
        let out = (0..n)
            .map(|_| r.u8().map(ChunkStatus::from_u8))
            .collect::<Result<Vec<_>, _>>()?;
        if out.len() != blobs.len() {
            return Err(TransferError::Protocol("PUT reply count mismatch".into()));
        }
        Ok(out)
    }

    /// Stores one chunk on the server's default tier.
    pub fn put(&self, chunk: &KVChunk, pin: bool) -> Result<ChunkStatus, TransferError> {
        Ok(self.put_blobs(&[&identity_blob(chunk)], &[], pin)?[0])
    }

    /// Sends `chunks` coalesced into as few messages as fit under the
    /// connection's payload limit. Returns one status per chunk, in order.
    pub fn send_chunks(
        &self,
        chunks: &[KVChunk],
        tiers: &[TierId],
    ) -> Result<Vec<ChunkStatus>, TransferError> {
        let blobs: Vec<StoredBlob> = chunks.iter().map(identity_blob).collect();
        let mut out = Vec::with_capacity(chunks.len());
        for group in coalesce(&blobs, self.conn.max_payload()) {
            out.extend(self.put_blobs(&group, tiers, false)?);
        }
        Ok(out)
    }

    /// Number of PUT messages [`send_chunks`](Self::send_chunks) would use.
    pub fn message_count(chunks: &[KVChunk], max_payload: usize) -> usize {
        let blobs: Vec<StoredBlob> = chunks.iter().map(identity_blob).collect();
        coalesce(&blobs, max_payload).len()
    }

    pub fn get(&self, key: &ChunkKey) -> Result<Option<KVChunk>, TransferError> {
        let blobs = self.get_blobs(std::slice::from_ref(key))?;
        match blobs.into_iter().next().flatten() {
            None => Ok(None),
            Some(b) => Ok(Some(
                kvtier_core::storage::decode_blob(&b)
                    .map_err(|e| TransferError::Protocol(e.to_string()))?,
            )),
        }
    }

    fn get_blobs(&self, keys: &[ChunkKey]) -> Result<Vec<Option<StoredBlob>>, TransferError> {
        let mut w = Writer::new();
        w.keys(keys);
        let resp = self.conn.request(Opcode::Get, &w.finish())?;
        let mut r = Reader::new(&resp.payload);
        let n = r.count(1)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            match r.u8()? {
                status::STORED => {
                    let b = read_blob(&mut r)?;
                    if !b.verify() {
                        return Err(TransferError::Protocol(
                            "checksum mismatch in GET reply".into(),
                        ));
                    }
                    out.push(Some(b));
                }
                _ => out.push(None),
            }
        }
        Ok(out)
    }

    pub fn exists(&self, keys: &[ChunkKey]) -> Result<Vec<Option<(usize, usize)>>, TransferError> {
        let mut w = Writer::new();
        w.keys(keys);
        let resp = self.conn.request(Opcode::Exists, &w.finish())?;
        let mut r = Reader::new(&resp.payload);
        let n = r.count(9)?;
        (0..n)
            .map(|_| {
                let present = r.u8()? != 0;
                let tokens = r.u32()? as usize;
                let len = r.u32()? as usize;
                Ok(present.then_some((tokens, len)))
            })
            .collect()
    }

    pub fn clear(&self, keys: &[ChunkKey], tier: &TierId) -> Result<ClearReport, TransferError> {
        self.clear_named(keys, &tier.to_string())
    }

    /// Clears `keys` from every tier the server owns (not its remote tiers).
    /// Per-tier counts are summed; `absent` counts keys found on no tier.
    pub fn clear_local(&self, keys: &[ChunkKey]) -> Result<ClearReport, TransferError> {
        self.clear_named(keys, "")
    }

    fn clear_named(&self, keys: &[ChunkKey], tier: &str) -> Result<ClearReport, TransferError> {
        let mut w = Writer::new();
        w.str(tier).keys(keys);
        let resp = self.conn.request(Opcode::Clear, &w.finish())?;
        let mut r = Reader::new(&resp.payload);
        Ok(ClearReport {
            removed: r.u32()? as usize,
            refused_pinned: r.u32()? as usize,
            refused_busy: r.u32()? as usize,
            absent: r.u32()? as usize,
        })
    }

    pub fn pin(
        &self,
        keys: &[ChunkKey],
        tier: &TierId,
        on: bool,
    ) -> Result<Vec<bool>, TransferError> {
        let mut w = Writer::new();
        w.str(&tier.to_string()).u8(on as u8).keys(keys);
        let resp = self.conn.request(Opcode::Pin, &w.finish())?;
        let mut r = Reader::new(&resp.payload);
        let n = r.count(1)?;
        (0..n).map(|_| Ok(r.u8()? == status::STORED)).collect()
    }

    pub fn compress(
        &self,
        keys: &[ChunkKey],
        tier: &TierId,
        codec: &str,
    ) -> Result<Vec<Option<u64>>, TransferError> {
        let mut w = Writer::new();
        w.str(&tier.to_string()).str(codec).keys(keys);
        let resp = self.conn.request(Opcode::Compress, &w.finish())?;
        let mut r = Reader::new(&resp.payload);
        let n = r.count(9)?;
        (0..n)
            .map(|_| {
                let ok = r.u8()? == status::STORED;
                let size = r.u64()?;
                Ok(ok.then_some(size))
            })
            .collect()
    }
}

/// Groups blobs greedily so each group's PUT payload fits in `max_payload`.
/// A blob larger than the limit on its own still gets its own group.
fn coalesce(blobs: &[StoredBlob], max_payload: usize) -> Vec<Vec<&StoredBlob>> {
    let mut groups: Vec<Vec<&StoredBlob>> = Vec::new();
    let mut size = usize::MAX;
    for b in blobs {
        let rec = 32 + 4 + 2 + b.meta.key.model_tag.len() + 4 + 2 + 4 + 1 + 8 + 4 + b.data.len();
        if size.saturating_add(rec) > max_payload.saturating_sub(HEADER_LEN) || groups.is_empty() {
            groups.push(Vec::new());
            size = 6;
        }
        size += rec;
        groups.last_mut().unwrap().push(b);
    }
    groups
}

/// Remote tier: chunks live in a store server reached over the wire.
///
/// Encoded blobs are decoded by the server and kept raw, so a compressed
/// copy reads back with the codec's error but the full size.
pub struct RemoteTier {
    name: Arc<str>,
    client: RemoteClient,
    server_tiers: Vec<TierId>,
}

impl RemoteTier {
    pub fn connect(name: &str, addr: impl ToSocketAddrs) -> Result<Self, TransferError> {
        Ok(Self::new(name, RemoteClient::connect(addr)?))
    }

    pub fn new(name: &str, client: RemoteClient) -> Self {
        Self {
            name: name.into(),
            client,
            server_tiers: Vec::new(),
        }
    }

    pub fn client(&self) -> &RemoteClient {
        &self.client
    }
}

fn tier_err(e: TransferError) -> TierError {
    TierError::Io(e.to_string())
}

impl TierBackend for RemoteTier {
    fn id(&self) -> TierId {
        TierId::Remote(self.name.clone())
    }

    fn capacity(&self) -> Option<u64> {
        None
    }

    fn write(&self, blob: &StoredBlob) -> Result<u64, TierError> {
        let raw;
        let blob = if blob.codec == Codec::Identity {
            blob
        } else {
            let data = blob
                .codec
                .decode(&blob.data, blob.meta.raw_len())
                .map_err(|e| TierError::Corrupt(e.to_string()))?;
            raw = StoredBlob {
                meta: blob.meta.clone(),
                codec: Codec::Identity,
                checksum: kvtier_core::checksum(&data),
                data: data.into(),
            };
            &raw
        };
        let st = self
            .client
            .put_blobs(&[blob], &self.server_tiers, false)
            .map_err(tier_err)?;
        match st[0] {
            ChunkStatus::Stored | ChunkStatus::AlreadyPresent => Ok(0),
            ChunkStatus::Corrupt => Err(TierError::Corrupt("server rejected checksum".into())),
            ChunkStatus::Failed => Err(TierError::Full),
        }
    }

    fn read(&self, meta: &ChunkMeta, _offset: u64) -> Result<StoredBlob, TierError> {
        let mut blobs = self
            .client
            .get_blobs(std::slice::from_ref(&meta.key))
            .map_err(tier_err)?;
        match blobs.pop().flatten() {
            Some(b) => Ok(StoredBlob {
                meta: meta.clone(),
                ..b
            }),
            None => Err(TierError::NotFound),
        }
    }

    fn remove(&self, meta: &ChunkMeta, _offset: u64) -> Result<(), TierError> {
        // The server may hold the chunk on any of its tiers.
        let keys = std::slice::from_ref(&meta.key);
        for t in [TierId::RamPool, TierId::LocalDisk] {
            self.client.clear(keys, &t).map_err(tier_err)?;
        }
        Ok(())
    }

    fn external(&self) -> bool {
        true
    }

    fn probe(&self, keys: &[ChunkKey]) -> Result<Vec<Option<Probe>>, TierError> {
        Ok(self
            .client
            .exists(keys)
            .map_err(tier_err)?
            .into_iter()
            .map(|e| {
                e.map(|(token_count, stored_len)| Probe {
                    offset: 0,
                    stored_len,
                    token_count,
                    codec: Codec::Identity,
                })
            })
            .collect())
    }
}
