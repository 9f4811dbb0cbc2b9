//! Message bodies for the control plane. Framing is the ordinary wire
//! protocol; only the payloads are defined here.
//!
//! ```text
//! EVENT   u8 kind | str instance | ...
//!   0 register: str endpoint | u32 n | n x (key | u32 tokens | tiers | pinned)
//!   1 batch:    u32 n | n x (u8 0=stored 1=evicted | key | str tier | u32 tokens)
//!   2 leave
//!   tiers/pinned: u8 count | count x str
//! LOOKUP  u8 sub | ...
//!   0 tokens:    tokens          -> u32 n | n x (str instance | u64 hit tokens)
//!   1 query_ip:  u32 n | n x str -> u32 n | n x (str instance | u8 found | str endpoint)
//!   2 instances:                 -> u32 n | n x (str instance | str endpoint | u64 chunks)
//! MOVE     str src | str dst | tokens                 -> u64 moved tokens
//! CLEAR    str instance | str tier | tokens           -> u32 n | per chunk u8 status
//! PIN      str instance | str tier | u8 on | tokens   -> u32 n | per chunk u8 status
//! COMPRESS str instance | str tier | str codec | tokens -> u32 n | per chunk u8 status, u64 size
//! ```
//!
//! Per-chunk status bytes are those of the store protocol
//! (`kvtier_transfer::server::status`).

use std::collections::BTreeSet;

use kvtier_core::storage::{EntryInfo, EventKind, StoreEvent};
use kvtier_core::TierId;
use kvtier_transfer::body::{Reader, Writer};

use crate::ControllerError;

pub const EV_REGISTER: u8 = 0;
pub const EV_BATCH: u8 = 1;
pub const EV_LEAVE: u8 = 2;

pub const LOOKUP_TOKENS: u8 = 0;
pub const LOOKUP_QUERY_IP: u8 = 1;
pub const LOOKUP_INSTANCES: u8 = 2;

#[derive(Debug, Clone)]
pub enum EventMsg {
    Register {
        instance: String,
        endpoint: String,
        snapshot: Vec<EntryInfo>,
    },
    Batch {
        instance: String,
        events: Vec<StoreEvent>,
    },
    Leave {
        instance: String,
    },
}

fn write_tiers(w: &mut Writer, t: &BTreeSet<TierId>) {
    w.u8(t.len() as u8);
    for x in t {
        w.str(&x.to_string());
    }
}

pub fn read_tier(r: &mut Reader<'_>) -> Result<TierId, ControllerError> {
    r.str()?
        .parse::<TierId>()
        .map_err(|e| ControllerError::Protocol(e.to_string()))
}

fn read_tiers(r: &mut Reader<'_>) -> Result<BTreeSet<TierId>, ControllerError> {
    let n = r.u8()?;
    (0..n).map(|_| read_tier(r)).collect()
}

impl EventMsg {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            EventMsg::Register {
                instance,
                endpoint,
                snapshot,
            } => {
                w.u8(EV_REGISTER)
                    .str(instance)
                    .str(endpoint)
                    .u32(snapshot.len() as u32);
                for e in snapshot {
                    w.key(&e.key).u32(e.token_count as u32);
                    write_tiers(&mut w, &e.tiers);
                    write_tiers(&mut w, &e.pinned);
                }
            }
            EventMsg::Batch { instance, events } => {
                w.u8(EV_BATCH).str(instance).u32(events.len() as u32);
                for ev in events {
                    w.u8(match ev.kind {
                        EventKind::Stored => 0,
                        EventKind::Evicted => 1,
                    });
                    w.key(&ev.key)
                        .str(&ev.tier.to_string())
                        .u32(ev.token_count as u32);
                }
            }
            EventMsg::Leave { instance } => {
                w.u8(EV_LEAVE).str(instance);
            }
        }
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, ControllerError> {
        let mut r = Reader::new(buf);
        let kind = r.u8()?;
        let instance = r.str()?.to_string();
        let msg = match kind {
            EV_REGISTER => {
                let endpoint = r.str()?.to_string();
                let n = r.count(44)?;
                let mut snapshot = Vec::with_capacity(n);
                for _ in 0..n {
                    let key = r.key()?;
                    let token_count = r.u32()? as usize;
                    let tiers = read_tiers(&mut r)?;
                    let pinned = read_tiers(&mut r)?;
                    snapshot.push(EntryInfo {
                        key,
                        token_count,
                        tiers,
                        pinned,
                        codecs: Default::default(),
                        share_count: 0,
                    });
                }
                EventMsg::Register {
                    instance,
                    endpoint,
                    snapshot,
                }
            }
            EV_BATCH => {
                let n = r.count(47)?;
                let mut events = Vec::with_capacity(n);
                for _ in 0..n {
                    let kind = match r.u8()? {
                        0 => EventKind::Stored,
                        1 => EventKind::Evicted,
                        k => return Err(ControllerError::Protocol(format!("event kind {k}"))),
                    };
                    let key = r.key()?;
                    let tier = read_tier(&mut r)?;
                    let token_count = r.u32()? as usize;
                    events.push(StoreEvent {
                        kind,
                        key,
                        tier,
                        token_count,
                    });
                }
                EventMsg::Batch { instance, events }
            }
            EV_LEAVE => EventMsg::Leave { instance },
            k => return Err(ControllerError::Protocol(format!("event message kind {k}"))),
        };
        r.finish()?;
        Ok(msg)
    }
}
