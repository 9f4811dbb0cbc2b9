//! Payload encodings shared by every opcode.
//!
//! Strings are a u16 length followed by UTF-8 bytes. A chunk key is the
//! 32-byte digest, the u32 chunk index, then the model tag string. Token
//! lists are a u32 count followed by u32 token ids.

use bytes::Bytes;
use kvtier_core::codec::Codec;
use kvtier_core::storage::{ChunkMeta, StoredBlob};
use kvtier_core::{ChunkKey, Digest, TokenId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed payload at byte {offset}: {what}")]
pub struct BodyError {
    pub offset: usize,
    pub what: &'static str,
}

#[derive(Default, Debug, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            buf: Vec::with_capacity(n),
        }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        let b = s.as_bytes();
        let n = b.len().min(u16::MAX as usize);
        self.u16(n as u16);
        self.buf.extend_from_slice(&b[..n]);
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn raw(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn key(&mut self, k: &ChunkKey) -> &mut Self {
        self.raw(k.digest.as_bytes());
        self.u32(k.chunk_index);
        self.str(&k.model_tag)
    }

    pub fn keys(&mut self, keys: &[ChunkKey]) -> &mut Self {
        self.u32(keys.len() as u32);
        for k in keys {
            self.key(k);
        }
        self
    }

    pub fn tokens(&mut self, t: &[TokenId]) -> &mut Self {
        self.u32(t.len() as u32);
        for x in t {
            self.u32(*x);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn err(&self, what: &'static str) -> BodyError {
        BodyError {
            offset: self.pos,
            what,
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], BodyError> {
        if self.remaining() < n {
            return Err(self.err("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, BodyError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, BodyError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, BodyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, BodyError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<&'a str, BodyError> {
        let n = self.u16()? as usize;
        let at = self.pos;
        std::str::from_utf8(self.take(n)?).map_err(|_| BodyError {
            offset: at,
            what: "invalid utf-8",
        })
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], BodyError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    /// A u32 count, sanity-checked against the bytes left (`min_item` bytes
    /// per item) so corrupt counts cannot trigger huge allocations.
    pub fn count(&mut self, min_item: usize) -> Result<usize, BodyError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item.max(1)) > self.remaining() {
            return Err(self.err("count exceeds payload"));
        }
        Ok(n)
    }

    pub fn key(&mut self) -> Result<ChunkKey, BodyError> {
        let d: [u8; 32] = self.take(32)?.try_into().unwrap();
        let idx = self.u32()?;
        let tag = self.str()?;
        Ok(ChunkKey::new(Digest(d), tag, idx))
    }

    pub fn keys(&mut self) -> Result<Vec<ChunkKey>, BodyError> {
        let n = self.count(38)?;
        (0..n).map(|_| self.key()).collect()
    }

    pub fn tokens(&mut self) -> Result<Vec<TokenId>, BodyError> {
        let n = self.count(4)?;
        (0..n).map(|_| self.u32()).collect()
    }

    pub fn finish(&self) -> Result<(), BodyError> {
        if self.remaining() != 0 {
            return Err(self.err("trailing bytes"));
        }
        Ok(())
    }
}

/// Fixed part of a chunk record, followed on the wire by `data_len` bytes.
///
/// ```text
/// key | token_count u32 | num_layers u16 | bytes_per_token_per_layer u32
///     | codec u8 | checksum u64 | data_len u32 | data
/// ```
pub fn write_blob_header(w: &mut Writer, blob: &StoredBlob) {
    let m = &blob.meta;
    w.key(&m.key)
        .u32(m.token_count as u32)
        .u16(m.num_layers as u16)
        .u32(m.bytes_per_token_per_layer as u32)
        .u8(blob.codec.id())
        .u64(blob.checksum)
        .u32(blob.data.len() as u32);
}

pub fn write_blob(w: &mut Writer, blob: &StoredBlob) {
    write_blob_header(w, blob);
    w.raw(&blob.data);
}

pub fn read_blob(r: &mut Reader<'_>) -> Result<StoredBlob, BodyError> {
    let key = r.key()?;
    let token_count = r.u32()? as usize;
    let num_layers = r.u16()? as usize;
    let bptl = r.u32()? as usize;
    let at = r.pos();
    let codec = Codec::from_id(r.u8()?).ok_or(BodyError {
        offset: at,
        what: "unknown codec",
    })?;
    let checksum = r.u64()?;
    let data = Bytes::copy_from_slice(r.bytes()?);
    Ok(StoredBlob {
        meta: ChunkMeta {
            key,
            token_count,
            num_layers,
            bytes_per_token_per_layer: bptl,
        },
        codec,
        data,
        checksum,
    })
}
