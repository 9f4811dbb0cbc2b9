//! Core building blocks for a tiered KV-cache store: token chunking and
//! prefix keys, paged KV memory, the hierarchical chunk store, codecs and
//! the free-page offloader.

pub mod codec;
pub mod completion;
pub mod kv;
pub mod offload;
pub mod pool;
pub mod storage;
pub mod token;

pub use completion::Completion;
pub use kv::{
    ChunkDescriptor, ChunkLocation, KVChunk, KvError, ModelSpec, PageId, PagedKVStore, QueryId,
};
pub use storage::{StorageConfig, StorageEngine, StorageError, TierId, TierSpeed};
pub use token::{ChunkKey, ChunkSpan, Digest, TokenId, DEFAULT_CHUNK_SIZE};

/// 64-bit payload checksum used by every tier and the wire format.
pub fn checksum(data: &[u8]) -> u64 {
    xxhash_rust::xxh3::xxh3_64(data)
}
