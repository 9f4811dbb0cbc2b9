//! Payload codecs used by `compress`.
//!
//! `identity` is lossless. `q8-scale` reads the payload as little-endian
//! signed 16-bit lanes, stores one `f32` scale (`max |lane| / 127`) and one
//! signed byte per lane. Decoding multiplies back and rounds; every lane comes
//! back within `ceil(scale / 2) + 1` of the original value. An odd trailing byte
//! is kept verbatim.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Codec {
    Identity,
    Q8Scale,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("unknown codec {0:?}")]
    Unknown(String),
    #[error("encoded payload is truncated or malformed")]
    Malformed,
}

impl Codec {
    pub const ALL: [Codec; 2] = [Codec::Identity, Codec::Q8Scale];

    pub fn name(&self) -> &'static str {
        match self {
            Codec::Identity => "identity",
            Codec::Q8Scale => "q8-scale",
        }
    }

    pub fn id(&self) -> u8 {
        match self {
            Codec::Identity => 0,
            Codec::Q8Scale => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.id() == id)
    }

    pub fn by_name(name: &str) -> Result<Self, CodecError> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| CodecError::Unknown(name.to_string()))
    }

    pub fn is_lossless(&self) -> bool {
        matches!(self, Codec::Identity)
    }

    pub fn encode(&self, raw: &[u8]) -> Vec<u8> {
        match self {
            Codec::Identity => raw.to_vec(),
            Codec::Q8Scale => q8_encode(raw),
        }
    }

    /// `raw_len` is the decoded length, which the encoding alone can't recover
    /// for odd payloads.
    pub fn decode(&self, enc: &[u8], raw_len: usize) -> Result<Vec<u8>, CodecError> {
        match self {
            Codec::Identity => {
                if enc.len() != raw_len {
                    return Err(CodecError::Malformed);
                }
                Ok(enc.to_vec())
            }
            Codec::Q8Scale => q8_decode(enc, raw_len),
        }
    }

    /// Largest per-lane absolute error `decode(encode(raw))` can show.
    pub fn error_bound(&self, raw: &[u8]) -> u32 {
        match self {
            Codec::Identity => 0,
            Codec::Q8Scale => {
                let scale = q8_scale(raw);
                (scale / 2.0).ceil() as u32 + 1
            }
        }
    }
}

impl std::str::FromStr for Codec {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Codec::by_name(s)
    }
}

impl std::fmt::Display for Codec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn lanes(raw: &[u8]) -> impl Iterator<Item = i16> + '_ {
    raw.chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
}

fn q8_scale(raw: &[u8]) -> f32 {
    let max = lanes(raw)
        .map(|v| (v as i32).unsigned_abs())
        .max()
        .unwrap_or(0);
    if max == 0 {
        1.0
    } else {
        max as f32 / 127.0
    }
}

fn q8_encode(raw: &[u8]) -> Vec<u8> {
    let scale = q8_scale(raw);
    let mut out = Vec::with_capacity(4 + raw.len() / 2 + 1);
    out.extend_from_slice(&scale.to_le_bytes());
    out.extend(lanes(raw).map(|v| {
        let q = (v as f32 / scale).round().clamp(-127.0, 127.0) as i8;
        q as u8
    }));
    if raw.len() % 2 == 1 {
        out.push(raw[raw.len() - 1]);
    }
    out
}

fn q8_decode(enc: &[u8], raw_len: usize) -> Result<Vec<u8>, CodecError> {
    let n = raw_len / 2;
    if enc.len() != 4 + n + raw_len % 2 {
        return Err(CodecError::Malformed);
    }
    let scale = f32::from_le_bytes(enc[..4].try_into().unwrap());
    let mut out = Vec::with_capacity(raw_len);
    for &q in &enc[4..4 + n] {
        let v = ((q as i8) as f32 * scale)
            .round()
            .clamp(i16::MIN as f32, i16::MAX as f32) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    if raw_len % 2 == 1 {
        out.push(enc[4 + n]);
    }
    Ok(out)
}
