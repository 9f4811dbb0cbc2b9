//! Admin client for a manager reached over the wire.

use std::collections::BTreeMap;
use std::net::ToSocketAddrs;
use std::sync::Arc;

use kvtier_core::{TierId, TokenId};
use kvtier_transfer::body::{Reader, Writer};
use kvtier_transfer::{Connection, ErrCode, NoHandler, Opcode, TransferError};

use crate::manager::{ChunkOutcome, ChunkResult, InstanceInfo};
use crate::proto;
use crate::{ControllerError, InstanceId};

pub struct ControllerClient {
    conn: Connection,
}

impl ControllerClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ControllerError> {
        Ok(Self {
            conn: Connection::connect(addr, Arc::new(NoHandler))?,
        })
    }

    fn call(&self, op: Opcode, body: Vec<u8>) -> Result<Vec<u8>, ControllerError> {
        match self.conn.request(op, &body) {
            Ok(r) => Ok(r.payload),
            Err(TransferError::Remote {
                code: ErrCode::UnknownInstance,
                message,
            }) => Err(ControllerError::UnknownInstance(
                message.split('"').nth(1).unwrap_or(&message).to_string(),
            )),
            Err(e) => Err(e.into()),
        }
    }

    pub fn lookup(
        &self,
        tokens: &[TokenId],
    ) -> Result<BTreeMap<InstanceId, usize>, ControllerError> {
        let mut w = Writer::new();
        w.u8(proto::LOOKUP_TOKENS).tokens(tokens);
        let p = self.call(Opcode::Lookup, w.finish())?;
        let mut r = Reader::new(&p);
        let n = r.count(10)?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let id = r.str()?.to_string();
            out.insert(id, r.u64()? as usize);
        }
        Ok(out)
    }

    pub fn query_ip(
        &self,
        ids: &[InstanceId],
    ) -> Result<BTreeMap<InstanceId, Result<String, ControllerError>>, ControllerError> {
        let mut w = Writer::new();
        w.u8(proto::LOOKUP_QUERY_IP).u32(ids.len() as u32);
        for id in ids {
            w.str(id);
        }
        let p = self.call(Opcode::Lookup, w.finish())?;
        let mut r = Reader::new(&p);
        let n = r.count(5)?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let id = r.str()?.to_string();
            let found = r.u8()? != 0;
            let ep = r.str()?.to_string();
            let v = if found {
                Ok(ep)
            } else {
                Err(ControllerError::UnknownInstance(id.clone()))
            };
            out.insert(id, v);
        }
        Ok(out)
    }

    pub fn instances(&self) -> Result<Vec<InstanceInfo>, ControllerError> {
        let p = self.call(Opcode::Lookup, vec![proto::LOOKUP_INSTANCES])?;
        let mut r = Reader::new(&p);
        let n = r.count(12)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(InstanceInfo {
                instance: r.str()?.to_string(),
                endpoint: r.str()?.to_string(),
                chunks: r.u64()? as usize,
            });
        }
        Ok(out)
    }

    pub fn move_tokens(
        &self,
        src: &str,
        dst: &str,
        tokens: &[TokenId],
    ) -> Result<usize, ControllerError> {
        let mut w = Writer::new();
        w.str(src).str(dst).tokens(tokens);
        let p = self.call(Opcode::Move, w.finish())?;
        Ok(Reader::new(&p).u64()? as usize)
    }

    fn chunk_op(&self, op: Opcode, body: Vec<u8>) -> Result<Vec<ChunkOutcome>, ControllerError> {
        let p = self.call(op, body)?;
        let mut r = Reader::new(&p);
        let n = r.count(9)?;
        (0..n)
            .map(|i| {
                let result = ChunkResult::from_code(r.u8()?);
                let size = r.u64()?;
                Ok(ChunkOutcome {
                    chunk: i,
                    result,
                    size: (op == Opcode::Compress && result == ChunkResult::Done).then_some(size),
                })
            })
            .collect()
    }

    pub fn clear(
        &self,
        tokens: &[TokenId],
        instance: &str,
        tier: &TierId,
    ) -> Result<Vec<ChunkOutcome>, ControllerError> {
        let mut w = Writer::new();
        w.str(instance).str(&tier.to_string()).tokens(tokens);
        self.chunk_op(Opcode::Clear, w.finish())
    }

    pub fn pin(
        &self,
        tokens: &[TokenId],
        instance: &str,
        tier: &TierId,
        on: bool,
    ) -> Result<Vec<ChunkOutcome>, ControllerError> {
        let mut w = Writer::new();
        w.str(instance)
            .str(&tier.to_string())
            .u8(on as u8)
            .tokens(tokens);
        self.chunk_op(Opcode::Pin, w.finish())
    }

    pub fn compress(
        &self,
        tokens: &[TokenId],
        instance: &str,
        tier: &TierId,
        codec: &str,
    ) -> Result<Vec<ChunkOutcome>, ControllerError> {
        let mut w = Writer::new();
        w.str(instance)
            .str(&tier.to_string())
            .str(codec)
            .tokens(tokens);
        self.chunk_op(Opcode::Compress, w.finish())
    }
}
