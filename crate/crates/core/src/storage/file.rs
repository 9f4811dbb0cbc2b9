//! On-disk chunk file format.
//!
//! All integers little-endian.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "LMCK"
//!      4     2  version (1 = raw payload, 2 = codec-encoded payload)
//!      6     8  xxh3-64 of the model tag
//!     14    32  chunk digest
//!     46     2  token_count
//!     48     2  num_layers
//!     50     4  bytes_per_token_per_layer
//!   v1: 54   N  payload, N = token_count * num_layers * bytes_per_token_per_layer
//!   v2: 54   1  codec id
//!       55   4  encoded length E
//!       59   E  encoded payload
//!    end-8   8  xxh3-64 of the payload bytes as stored
//! ```

use bytes::Bytes;

use super::tier::{ChunkMeta, StoredBlob, TierError};
use crate::codec::Codec;
use crate::token::Digest;

pub const MAGIC: &[u8; 4] = b"LMCK";
pub const VERSION_RAW: u16 = 1;
pub const VERSION_ENCODED: u16 = 2;
const FIXED_HEADER: usize = 54;

pub fn model_tag_hash(tag: &str) -> u64 {
    xxhash_rust::xxh3::xxh3_64(tag.as_bytes())
}

pub fn encoded_len(blob: &StoredBlob) -> usize {
    let extra = if blob.codec == Codec::Identity { 0 } else { 5 };
    FIXED_HEADER + extra + blob.data.len() + 8
}

pub fn encode(blob: &StoredBlob) -> Vec<u8> {
    let m = &blob.meta;
    let mut out = Vec::with_capacity(encoded_len(blob));
    out.extend_from_slice(MAGIC);
    let raw = blob.codec == Codec::Identity;
    out.extend_from_slice(&(if raw { VERSION_RAW } else { VERSION_ENCODED }).to_le_bytes());
    out.extend_from_slice(&model_tag_hash(&m.key.model_tag).to_le_bytes());
    out.extend_from_slice(m.key.digest.as_bytes());
    out.extend_from_slice(&(m.token_count as u16).to_le_bytes());
    out.extend_from_slice(&(m.num_layers as u16).to_le_bytes());
    out.extend_from_slice(&(m.bytes_per_token_per_layer as u32).to_le_bytes());
    if !raw {
        out.push(blob.codec.id());
        out.extend_from_slice(&(blob.data.len() as u32).to_le_bytes());
    }
    out.extend_from_slice(&blob.data);
    out.extend_from_slice(&blob.checksum.to_le_bytes());
    out
}

fn corrupt(msg: impl Into<String>) -> TierError {
    TierError::Corrupt(msg.into())
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

/// Parses a chunk file and checks it against the expected chunk. The
/// checksum is verified here.
pub fn decode(file: &[u8], expect: &ChunkMeta) -> Result<StoredBlob, TierError> {
    if file.len() < FIXED_HEADER + 8 {
        return Err(corrupt("file shorter than header"));
    }
    if &file[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u16_at(file, 4);
    if u64_at(file, 6) != model_tag_hash(&expect.key.model_tag) {
        return Err(corrupt("model tag mismatch"));
    }
    if file[14..46] != expect.key.digest.0 {
        return Err(corrupt("digest mismatch"));
    }
    let token_count = u16_at(file, 46) as usize;
    let num_layers = u16_at(file, 48) as usize;
    let bptl = u32_at(file, 50) as usize;
    if token_count != expect.token_count
        || num_layers != expect.num_layers
        || bptl != expect.bytes_per_token_per_layer
    {
        return Err(corrupt("shape mismatch"));
    }
    let (codec, start, len) = match version {
        VERSION_RAW => (Codec::Identity, FIXED_HEADER, expect.raw_len()),
        VERSION_ENCODED => {
            if file.len() < FIXED_HEADER + 5 + 8 {
                return Err(corrupt("truncated codec header"));
            }
            let codec =
                Codec::from_id(file[FIXED_HEADER]).ok_or_else(|| corrupt("unknown codec id"))?;
            (
                codec,
                FIXED_HEADER + 5,
                u32_at(file, FIXED_HEADER + 1) as usize,
            )
        }
        v => return Err(corrupt(format!("unsupported version {v}"))),
    };
    if file.len() != start + len + 8 {
        return Err(corrupt("length mismatch"));
    }
    let data = Bytes::copy_from_slice(&file[start..start + len]);
    let checksum = u64_at(file, start + len);
    let blob = StoredBlob {
        meta: expect.clone(),
        codec,
        data,
        checksum,
    };
    if !blob.verify() {
        return Err(corrupt("checksum mismatch"));
    }
    Ok(blob)
}

/// Reads just the digest field of a file, if it looks like a chunk file.
pub fn peek_digest(file: &[u8]) -> Option<Digest> {
    if file.len() < 46 || &file[..4] != MAGIC {
        return None;
    }
    Some(Digest(file[14..46].try_into().unwrap()))
}
