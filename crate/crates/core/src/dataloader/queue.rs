//! Bounded set of resident shards with least-recently-sampled eviction.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::shard::{read_shard, ShardData, ShardManifest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueStats {
    pub loads: u64,
    pub evictions: u64,
    pub hits: u64,
    pub resident_bytes: usize,
    pub peak_resident_bytes: usize,
}

struct Slot {
    data: Arc<ShardData>,
    last_used: u64,
}

pub struct ShardQueue {
    dir: PathBuf,
    manifest: ShardManifest,
    capacity: usize,
    slots: Vec<Slot>,
    clock: u64,
    stats: QueueStats,
}

impl ShardQueue {
    pub fn open(dir: &Path, capacity: usize) -> Result<Self> {
        let manifest = ShardManifest::load(dir)?;
        Self::new(dir, manifest, capacity)
    }

    pub fn new(dir: &Path, manifest: ShardManifest, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::input("shard queue capacity must be at least 1"));
        }
        Ok(ShardQueue {
            dir: dir.to_path_buf(),
            manifest,
            capacity,
            slots: Vec::new(),
            clock: 0,
            stats: QueueStats::default(),
        })
    }

    pub fn manifest(&self) -> &ShardManifest {
        &self.manifest
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn stats(&self) -> QueueStats {
        self.stats
    }

    pub fn resident(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.data.index).collect()
    }

    pub fn resident_data(&self) -> Vec<Arc<ShardData>> {
        self.slots.iter().map(|s| s.data.clone()).collect()
    }

    /// Marks shard `index` as used, loading it (and evicting the least
    /// recently used shard when full) if it is not resident.
    pub fn get(&mut self, index: usize) -> Result<Arc<ShardData>> {
        self.clock += 1;
        if let Some(slot) = self.slots.iter_mut().find(|s| s.data.index == index) {
            slot.last_used = self.clock;
            self.stats.hits += 1;
            return Ok(slot.data.clone());
        }
        let data = Arc::new(read_shard(&self.dir, &self.manifest, index)?);
        self.stats.loads += 1;
        self.stats.resident_bytes += data.bytes;
        self.stats.peak_resident_bytes = self.stats.peak_resident_bytes.max(self.stats.resident_bytes);
        if self.slots.len() == self.capacity {
            let (victim, _) = self
                .slots
                .iter()
                .enumerate()
                .min_by_key(|(_, s)| s.last_used)
                .expect("capacity is at least 1");
            let old = self.slots.swap_remove(victim);
            self.stats.resident_bytes -= old.data.bytes;
            self.stats.evictions += 1;
        }
        self.slots.push(Slot {
            data: data.clone(),
            last_used: self.clock,
        });
        Ok(data)
    }

    /// Refreshes the recency of a resident shard without loading anything.
    pub fn touch(&mut self, index: usize) {
        self.clock += 1;
        if let Some(slot) = self.slots.iter_mut().find(|s| s.data.index == index) {
            slot.last_used = self.clock;
        }
    }
}
