//! RAM pool: a fixed number of equally sized chunk slots.

use std::ops::Range;

use bytes::Bytes;
use parking_lot::Mutex;

use super::tier::{ChunkMeta, StoredBlob, TierBackend, TierError, TierId};
use crate::codec::Codec;

struct Slot {
    buf: Box<[u8]>,
    len: usize,
    codec: Codec,
    checksum: u64,
}

/// Slab of `slot_count` slots of `slot_size` bytes. Slot memory is allocated
/// up front and reused; a chunk always occupies exactly one slot.
pub struct RamPool {
    slot_size: usize,
    slots: Vec<Mutex<Slot>>,
    free: Mutex<Vec<u32>>,
}

impl RamPool {
    pub fn new(pool_bytes: u64, slot_size: usize) -> Self {
        assert!(slot_size > 0);
        let count = (pool_bytes / slot_size as u64) as usize;
        let slots = (0..count)
            .map(|_| {
                Mutex::new(Slot {
                    buf: vec![0u8; slot_size].into_boxed_slice(),
                    len: 0,
                    codec: Codec::Identity,
                    checksum: 0,
                })
            })
            .collect();
        Self {
            slot_size,
            slots,
            free: Mutex::new((0..count as u32).rev().collect()),
        }
    }

    pub fn slot_size(&self) -> usize {
        self.slot_size
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn free_slots(&self) -> usize {
        self.free.lock().len()
    }

    fn slot(&self, offset: u64) -> Result<&Mutex<Slot>, TierError> {
        self.slots.get(offset as usize).ok_or(TierError::NotFound)
    }
}

impl TierBackend for RamPool {
    fn id(&self) -> TierId {
        TierId::RamPool
    }

    fn capacity(&self) -> Option<u64> {
        Some((self.slots.len() * self.slot_size) as u64)
    }

    fn charge(&self, _len: usize) -> u64 {
        self.slot_size as u64
    }

    fn write(&self, blob: &StoredBlob) -> Result<u64, TierError> {
        if blob.data.len() > self.slot_size {
            return Err(TierError::TooLarge {
                len: blob.data.len(),
                slot: self.slot_size,
            });
        }
        let idx = self.free.lock().pop().ok_or(TierError::Full)?;
        let mut slot = self.slots[idx as usize].lock();
        slot.buf[..blob.data.len()].copy_from_slice(&blob.data);
        slot.len = blob.data.len();
        slot.codec = blob.codec;
        slot.checksum = blob.checksum;
        Ok(idx as u64)
    }

    fn read(&self, meta: &ChunkMeta, offset: u64) -> Result<StoredBlob, TierError> {
        let slot = self.slot(offset)?.lock();
        Ok(StoredBlob {
            meta: meta.clone(),
            codec: slot.codec,
            data: Bytes::copy_from_slice(&slot.buf[..slot.len]),
            checksum: slot.checksum,
        })
    }

    fn read_range(
        &self,
        _meta: &ChunkMeta,
        offset: u64,
        range: Range<usize>,
        dst: &mut [u8],
    ) -> Result<(), TierError> {
        let slot = self.slot(offset)?.lock();
        if range.end > slot.len {
            return Err(TierError::Corrupt("range outside stored chunk".into()));
        }
        dst.copy_from_slice(&slot.buf[range]);
        Ok(())
    }

    fn remove(&self, _meta: &ChunkMeta, offset: u64) -> Result<(), TierError> {
        {
            let mut slot = self.slot(offset)?.lock();
            slot.len = 0;
        }
        self.free.lock().push(offset as u32);
        Ok(())
    }

    fn trusted(&self) -> bool {
        true
    }
}
