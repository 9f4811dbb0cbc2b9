//! Registry of chunks per instance, rebuilt purely from worker events.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use kvtier_core::storage::{EntryInfo, EventKind, StoreEvent};
use kvtier_core::token::{matched_prefix, ChunkIndex};
use kvtier_core::{ChunkKey, Digest, TierId};

use crate::InstanceId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolEntry {
    pub key: ChunkKey,
    pub token_count: usize,
    pub tiers: BTreeSet<TierId>,
    pub pinned: BTreeSet<TierId>,
}

#[derive(Debug, Clone, Default)]
struct Instance {
    endpoint: String,
    chunks: HashMap<Digest, PoolEntry>,
}

impl ChunkIndex for Instance {
    fn contains_key(&self, key: &ChunkKey) -> bool {
        self.chunks.contains_key(&key.digest)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TokenPool {
    instances: BTreeMap<InstanceId, Instance>,
}

impl TokenPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces everything known about `instance` with a snapshot.
    pub fn register(&mut self, instance: &str, endpoint: &str, snapshot: Vec<EntryInfo>) {
        let chunks = snapshot
            .into_iter()
            .filter(|e| !e.tiers.is_empty())
            .map(|e| {
                (
                    e.key.digest,
                    PoolEntry {
                        key: e.key,
                        token_count: e.token_count,
                        tiers: e.tiers,
                        pinned: e.pinned,
                    },
                )
            })
            .collect();
        self.instances.insert(
            instance.to_string(),
            Instance {
                endpoint: endpoint.to_string(),
                chunks,
            },
        );
    }

    pub fn unregister(&mut self, instance: &str) -> bool {
        self.instances.remove(instance).is_some()
    }

    /// Applies one event. Events for unregistered instances are dropped.
    pub fn apply(&mut self, instance: &str, ev: &StoreEvent) {
        let Some(inst) = self.instances.get_mut(instance) else {
            return;
        };
        match ev.kind {
            EventKind::Stored => {
                let e = inst
                    .chunks
                    .entry(ev.key.digest)
                    .or_insert_with(|| PoolEntry {
                        key: ev.key.clone(),
                        token_count: ev.token_count,
                        tiers: BTreeSet::new(),
                        pinned: BTreeSet::new(),
                    });
                e.tiers.insert(ev.tier.clone());
            }
            EventKind::Evicted => {
                if let Some(e) = inst.chunks.get_mut(&ev.key.digest) {
                    e.tiers.remove(&ev.tier);
                    e.pinned.remove(&ev.tier);
                    if e.tiers.is_empty() {
                        inst.chunks.remove(&ev.key.digest);
                    }
                }
            }
        }
    }

    pub fn set_pinned(&mut self, instance: &str, key: &ChunkKey, tier: &TierId, on: bool) {
        if let Some(e) = self
            .instances
            .get_mut(instance)
            .and_then(|i| i.chunks.get_mut(&key.digest))
        {
            if on && e.tiers.contains(tier) {
                e.pinned.insert(tier.clone());
            } else if !on {
                e.pinned.remove(tier);
            }
        }
    }

    /// Matched prefix length per instance; instances with no hit are left out.
    pub fn lookup(
        &self,
        keys: &[ChunkKey],
        total_tokens: usize,
        chunk_size: usize,
    ) -> BTreeMap<InstanceId, usize> {
        self.instances
            .iter()
            .filter_map(|(id, inst)| {
                let hit = matched_prefix(keys, total_tokens, chunk_size, inst);
                (hit > 0).then(|| (id.clone(), hit))
            })
            .collect()
    }

    pub fn endpoint(&self, instance: &str) -> Option<&str> {
        self.instances.get(instance).map(|i| i.endpoint.as_str())
    }

    pub fn instances(&self) -> impl Iterator<Item = (&InstanceId, &str, usize)> {
        self.instances
            .iter()
            .map(|(id, i)| (id, i.endpoint.as_str(), i.chunks.len()))
    }

    pub fn is_registered(&self, instance: &str) -> bool {
        self.instances.contains_key(instance)
    }

    pub fn entry(&self, instance: &str, key: &ChunkKey) -> Option<&PoolEntry> {
        self.instances.get(instance)?.chunks.get(&key.digest)
    }

    /// All entries of one instance, sorted by digest.
    pub fn entries(&self, instance: &str) -> Vec<PoolEntry> {
        let mut v: Vec<PoolEntry> = self
            .instances
            .get(instance)
            .map(|i| i.chunks.values().cloned().collect())
            .unwrap_or_default();
        v.sort_by_key(|a| a.key.digest);
        v
    }
}
