//! Content-addressed blob cache with declared (not real) sizes.
//!
//! Eviction is least-recently-acquired and only happens when a new blob would
//! not fit. Invocation inputs go first; context blobs are the precious ones.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BlobKey, BlobKind, BlobRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AcquiredFrom {
    Fs,
    Peer,
    Scheduler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: BlobKey,
    pub declared_bytes: u64,
    pub kind: BlobKind,
    pub acquired_from: AcquiredFrom,
    pub acquired_at: f64,
    /// Tie-breaker for entries acquired at the same emulated instant.
    #[serde(default)]
    pub seq: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum CacheError {
    #[error("need {needed} bytes of disk but only {available} can be freed")]
    InsufficientDisk { needed: u64, available: u64 },
    #[error("cache index: {0}")]
    Index(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobCache {
    capacity: u64,
    entries: HashMap<BlobKey, CacheEntry>,
    next_seq: u64,
}

impl BlobCache {
    pub fn new(capacity: u64) -> Self {
        BlobCache {
            capacity,
            entries: HashMap::new(),
            next_seq: 0,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn used(&self) -> u64 {
        self.entries.values().map(|e| e.declared_bytes).sum()
    }

    pub fn free(&self) -> u64 {
        self.capacity.saturating_sub(self.used())
    }

    pub fn contains(&self, key: &BlobKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get(&self, key: &BlobKey) -> Option<&CacheEntry> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted keys, as reported at registration.
    pub fn inventory(&self) -> Vec<BlobKey> {
        let mut keys: Vec<_> = self.entries.keys().cloned().collect();
        keys.sort();
        keys
    }

    /// Evicts until `bytes` more fit, never touching `protected`. Returns the
    /// evicted keys; on failure nothing is evicted.
    pub fn make_room(&mut self, bytes: u64, protected: &[BlobKey]) -> Result<Vec<BlobKey>, CacheError> {
        if bytes <= self.free() {
            return Ok(Vec::new());
        }
        let mut victims: Vec<&CacheEntry> = self.entries.values().filter(|e| !protected.contains(&e.key)).collect();
        let evictable: u64 = victims.iter().map(|e| e.declared_bytes).sum();
        if bytes > self.free() + evictable {
            return Err(CacheError::InsufficientDisk {
                needed: bytes,
                available: self.free() + evictable,
            });
        }
        victims.sort_by(|a, b| {
            let a_first = a.kind != BlobKind::InvocationInput;
            let b_first = b.kind != BlobKind::InvocationInput;
            a_first
                .cmp(&b_first)
                .then(a.acquired_at.total_cmp(&b.acquired_at))
                .then(a.seq.cmp(&b.seq))
        });
        let mut freed = self.free();
        let mut evict = Vec::new();
        for v in victims {
            if freed >= bytes {
                break;
            }
            freed += v.declared_bytes;
            evict.push(v.key.clone());
        }
        for k in &evict {
            self.entries.remove(k);
        }
        Ok(evict)
    }

    /// Inserts a blob, evicting others if needed. Re-inserting a present key
    /// refreshes nothing and returns no evictions.
    pub fn insert(
        &mut self,
        blob: &BlobRef,
        from: AcquiredFrom,
        at: f64,
        protected: &[BlobKey],
    ) -> Result<Vec<BlobKey>, CacheError> {
        if self.contains(&blob.key) {
            return Ok(Vec::new());
        }
        let mut protect = protected.to_vec();
        protect.push(blob.key.clone());
        let evicted = self.make_room(blob.bytes, &protect)?;
        let seq = self.next_seq;
        self.next_seq += 1;
        self.entries.insert(
            blob.key.clone(),
            CacheEntry {
                key: blob.key.clone(),
                declared_bytes: blob.bytes,
                kind: blob.kind,
                acquired_from: from,
                acquired_at: at,
                seq,
            },
        );
        Ok(evicted)
    }

    pub fn remove(&mut self, key: &BlobKey) -> Option<CacheEntry> {
        self.entries.remove(key)
    }

    /// Persists the index as JSON so a restarted worker can report its inventory.
    pub fn save(&self, path: &Path) -> Result<(), CacheError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CacheError::Index(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CacheError::Index(e.to_string()))
    }

    /// Loads a saved index, keeping only entries accepted by `present` (used to
    /// drop blobs whose backing file disappeared). The capacity given here wins.
    pub fn load(path: &Path, capacity: u64, present: impl Fn(&CacheEntry) -> bool) -> Result<Self, CacheError> {
        let text = std::fs::read_to_string(path).map_err(|e| CacheError::Index(e.to_string()))?;
        let mut cache: BlobCache = serde_json::from_str(&text).map_err(|e| CacheError::Index(e.to_string()))?;
        cache.capacity = capacity;
        cache.entries.retain(|_, e| present(e));
        Ok(cache)
    }
}
