//! Local disk tier: one file per chunk under a two-level fan-out.
//!
//! `<root>/<hex byte 0>/<hex byte 1>/<hex digest>`

use std::fs;
use std::io::{Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use super::file;
use super::tier::{ChunkMeta, StoredBlob, TierBackend, TierError, TierId};
use crate::codec::Codec;
use crate::token::Digest;

pub struct DiskTier {
    root: PathBuf,
    quota: u64,
}

impl DiskTier {
    pub fn new(root: impl Into<PathBuf>, quota: u64) -> Result<Self, TierError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root, quota })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, digest: &Digest) -> PathBuf {
        let hex = digest.to_hex();
        self.root.join(&hex[0..2]).join(&hex[2..4]).join(hex)
    }

    /// Digests of every chunk file currently on disk.
    pub fn scan(&self) -> Vec<Digest> {
        walk(&self.root)
            .into_iter()
            .filter_map(|p| {
                let name = p.file_name()?.to_str()?;
                Digest::from_hex(name)
            })
            .collect()
    }
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let Ok(rd) = fs::read_dir(dir) else {
        return out;
    };
    for e in rd.flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

impl TierBackend for DiskTier {
    fn id(&self) -> TierId {
        TierId::LocalDisk
    }

    fn capacity(&self) -> Option<u64> {
        Some(self.quota)
    }

    fn charge(&self, len: usize) -> u64 {
        // header + optional codec fields + checksum
        (len + 54 + 5 + 8) as u64
    }

    fn write(&self, blob: &StoredBlob) -> Result<u64, TierError> {
        let path = self.path_for(&blob.meta.key.digest);
        fs::create_dir_all(path.parent().expect("fan-out dir"))?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&file::encode(blob))?;
        }
        fs::rename(&tmp, &path)?;
        Ok(0)
    }

    fn read(&self, meta: &ChunkMeta, _offset: u64) -> Result<StoredBlob, TierError> {
        let bytes = fs::read(self.path_for(&meta.key.digest))?;
        file::decode(&bytes, meta)
    }

    fn read_range(
        &self,
        meta: &ChunkMeta,
        offset: u64,
        range: Range<usize>,
        dst: &mut [u8],
    ) -> Result<(), TierError> {
        // Partial reads skip the payload checksum, so only raw files are
        // read in place; encoded ones go through a full verified read.
        let path = self.path_for(&meta.key.digest);
        let mut f = fs::File::open(&path)?;
        let mut head = [0u8; 6];
        f.read_exact(&mut head)?;
        if &head[..4] != file::MAGIC || u16::from_le_bytes([head[4], head[5]]) != file::VERSION_RAW
        {
            let blob = self.read(meta, offset)?;
            if blob.codec != Codec::Identity {
                return Err(TierError::Corrupt("range read of encoded chunk".into()));
            }
            dst.copy_from_slice(&blob.data[range]);
            return Ok(());
        }
        f.seek(SeekFrom::Start(54 + range.start as u64))?;
        f.read_exact(dst)?;
        Ok(())
    }

    fn remove(&self, meta: &ChunkMeta, _offset: u64) -> Result<(), TierError> {
        match fs::remove_file(self.path_for(&meta.key.digest)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::ChunkKey;
    use bytes::Bytes;

    #[test]
    fn fan_out_layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tier = DiskTier::new(dir.path(), 1 << 20).unwrap();
        let digest = Digest([0xab; 32]);
        let meta = ChunkMeta {
            key: ChunkKey::new(digest, "m", 0),
            token_count: 2,
            num_layers: 2,
            bytes_per_token_per_layer: 4,
        };
        let data = Bytes::from((0..16u8).collect::<Vec<_>>());
        let blob = StoredBlob {
            meta: meta.clone(),
            codec: Codec::Identity,
            checksum: crate::checksum(&data),
            data: data.clone(),
        };
        tier.write(&blob).unwrap();
        let path = tier.path_for(&digest);
        assert!(path.ends_with(format!("ab/ab/{}", digest.to_hex())));
        assert!(path.exists());
        assert_eq!(tier.read(&meta, 0).unwrap().data, data);
        let mut layer = [0u8; 8];
        tier.read_range(&meta, 0, 8..16, &mut layer).unwrap();
        assert_eq!(&layer, &data[8..16]);
        assert_eq!(tier.scan(), vec![digest]);
        tier.remove(&meta, 0).unwrap();
        assert_eq!(tier.read(&meta, 0).unwrap_err(), TierError::NotFound);
    }
}
