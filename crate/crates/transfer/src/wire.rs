//! Frame layout. All integers little-endian.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "LMWP"
//!      4     2  version (1)
//!      6     1  opcode
//!      7     8  request id
//!     15     4  payload length N
//!     19     N  payload
//! ```
//!
//! Replies (`OK`, `ERR`) carry the request id they answer. An `ERR` payload
//! is a u16 error code followed by a length-prefixed UTF-8 message.

use std::fmt;

pub const MAGIC: &[u8; 4] = b"LMWP";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 19;
pub const DEFAULT_MAX_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    Put = 0x01,
    Get = 0x02,
    Exists = 0x03,
    Clear = 0x04,
    Pin = 0x05,
    Move = 0x06,
    Compress = 0x07,
    Lookup = 0x08,
    PdPush = 0x09,
    Event = 0x0a,
    Ok = 0x80,
    Err = 0x81,
}

impl Opcode {
    pub const ALL: [Opcode; 12] = [
        Opcode::Put,
        Opcode::Get,
        Opcode::Exists,
        Opcode::Clear,
        Opcode::Pin,
        Opcode::Move,
        Opcode::Compress,
        Opcode::Lookup,
        Opcode::PdPush,
        Opcode::Event,
        Opcode::Ok,
        Opcode::Err,
    ];

    pub fn from_u8(b: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|o| *o as u8 == b)
    }

    pub fn is_reply(self) -> bool {
        matches!(self, Opcode::Ok | Opcode::Err)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Opcode::Put => "PUT",
            Opcode::Get => "GET",
            Opcode::Exists => "EXISTS",
            Opcode::Clear => "CLEAR",
            Opcode::Pin => "PIN",
            Opcode::Move => "MOVE",
            Opcode::Compress => "COMPRESS",
            Opcode::Lookup => "LOOKUP",
            Opcode::PdPush => "PD_PUSH",
            Opcode::Event => "EVENT",
            Opcode::Ok => "OK",
            Opcode::Err => "ERR",
        };
        f.write_str(s)
    }
}

/// Error codes carried in `ERR` payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum ErrCode {
    BadRequest = 1,
    NotFound = 2,
    TooLarge = 3,
    UnknownQuery = 4,
    Unsupported = 5,
    Internal = 6,
    UnknownInstance = 7,
    TierFull = 8,
}

impl ErrCode {
    pub fn from_u16(v: u16) -> Self {
        match v {
            1 => ErrCode::BadRequest,
            2 => ErrCode::NotFound,
            3 => ErrCode::TooLarge,
            4 => ErrCode::UnknownQuery,
            5 => ErrCode::Unsupported,
            7 => ErrCode::UnknownInstance,
            8 => ErrCode::TierFull,
            _ => ErrCode::Internal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub opcode: Opcode,
    pub request_id: u64,
    pub len: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("unknown opcode {0:#04x}")]
    UnknownOpcode(u8),
    #[error("payload of {len} bytes exceeds limit {max}")]
    TooLarge { len: u32, max: usize },
}

impl FrameError {
    /// Offset of the offending field within the header.
    pub fn field_offset(&self) -> usize {
        match self {
            FrameError::BadMagic => 0,
            FrameError::BadVersion(_) => 4,
            FrameError::UnknownOpcode(_) => 6,
            FrameError::TooLarge { .. } => 15,
        }
    }
}

/// Parse failure at an absolute stream offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("{kind} at byte {offset}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: FrameError,
}

impl Header {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[..4].copy_from_slice(MAGIC);
        h[4..6].copy_from_slice(&VERSION.to_le_bytes());
        h[6] = self.opcode as u8;
        h[7..15].copy_from_slice(&self.request_id.to_le_bytes());
        h[15..19].copy_from_slice(&self.len.to_le_bytes());
        h
    }

    /// Validates everything but the length limit.
    pub fn decode(h: &[u8; HEADER_LEN]) -> Result<Self, FrameError> {
        if &h[..4] != MAGIC {
            return Err(FrameError::BadMagic);
        }
        let version = u16::from_le_bytes([h[4], h[5]]);
        if version != VERSION {
            return Err(FrameError::BadVersion(version));
        }
        let opcode = Opcode::from_u8(h[6]).ok_or(FrameError::UnknownOpcode(h[6]))?;
        Ok(Header {
            opcode,
            request_id: u64::from_le_bytes(h[7..15].try_into().unwrap()),
            len: u32::from_le_bytes(h[15..19].try_into().unwrap()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub opcode: Opcode,
    pub request_id: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(opcode: Opcode, request_id: u64, payload: impl Into<Vec<u8>>) -> Self {
        Self {
            opcode,
            request_id,
            payload: payload.into(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let h = Header {
            opcode: self.opcode,
            request_id: self.request_id,
            len: self.payload.len() as u32,
        };
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&h.encode());
        out.extend_from_slice(&self.payload);
        out
    }
}

/// Result of parsing a byte buffer as a frame sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamParse {
    pub frames: Vec<Frame>,
    /// First invalid header, if any. Parsing stops there.
    pub error: Option<ParseError>,
    /// Bytes of an incomplete trailing frame.
    pub incomplete: usize,
}

/// Parses one frame from the start of `buf`. `Ok(None)` means more bytes
/// are needed.
pub fn parse_frame(buf: &[u8], max_payload: usize) -> Result<Option<(Frame, usize)>, FrameError> {
    // Check the header fields that are already present so that failures
    // are reported at the same offset however the stream is split.
    let n = buf.len().min(HEADER_LEN);
    let mut h = [0u8; HEADER_LEN];
    h[..n].copy_from_slice(&buf[..n]);
    if buf[..n.min(4)] != MAGIC[..n.min(4)] {
        return Err(FrameError::BadMagic);
    }
    if n < HEADER_LEN {
        if n >= 6 && u16::from_le_bytes([h[4], h[5]]) != VERSION {
            return Err(FrameError::BadVersion(u16::from_le_bytes([h[4], h[5]])));
        }
        if n >= 7 && Opcode::from_u8(h[6]).is_none() {
            return Err(FrameError::UnknownOpcode(h[6]));
        }
        return Ok(None);
    }
    let header = Header::decode(&h)?;
    if header.len as usize > max_payload {
        return Err(FrameError::TooLarge {
            len: header.len,
            max: max_payload,
        });
    }
    let total = HEADER_LEN + header.len as usize;
    if buf.len() < total {
        return Ok(None);
    }
    Ok(Some((
        Frame {
            opcode: header.opcode,
            request_id: header.request_id,
            payload: buf[HEADER_LEN..total].to_vec(),
        },
        total,
    )))
}

/// Parses `buf` as a sequence of frames. Deterministic: the same input
/// always yields the same frames and the same failure offset.
pub fn parse_stream(buf: &[u8], max_payload: usize) -> StreamParse {
    let mut frames = Vec::new();
    let mut at = 0;
    loop {
        if at == buf.len() {
            return StreamParse {
                frames,
                error: None,
                incomplete: 0,
            };
        }
        match parse_frame(&buf[at..], max_payload) {
            Ok(Some((f, used))) => {
                frames.push(f);
                at += used;
            }
            Ok(None) => {
                return StreamParse {
                    frames,
                    error: None,
                    incomplete: buf.len() - at,
                }
            }
            Err(kind) => {
                return StreamParse {
                    frames,
                    error: Some(ParseError {
                        offset: at + kind.field_offset(),
                        kind,
                    }),
                    incomplete: 0,
                }
            }
        }
    }
}
