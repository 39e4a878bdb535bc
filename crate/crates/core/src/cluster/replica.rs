use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::index::{Index, IndexError, LogEntry, QuerySpec, SearchResult, SnapshotImage};
use crate::model::{ContentDigest, MetadataRecord, RecordKey};

/// Replica health as tracked by the coordinator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReplicaState {
    Live,
    Down,
    CatchingUp,
}

/// Body of `GET /replica/health`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaHealth {
    pub state: ReplicaState,
    pub watermark: u64,
}

/// One `(type, id, digest)` line of an inventory.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InventoryItem {
    #[serde(flatten)]
    pub key: RecordKey,
    pub digest: ContentDigest,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplicaError {
    #[error("replica {0} unreachable")]
    Unreachable(String),
    #[error("sequence gap: replica expected {expected}, got {got}")]
    SeqGap { expected: u64, got: u64 },
    #[error("replica rejected request: {0}")]
    Rejected(String),
}

impl From<IndexError> for ReplicaError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::SeqGap { expected, got } => ReplicaError::SeqGap { expected, got },
            other => ReplicaError::Rejected(other.to_string()),
        }
    }
}

/// The RPC surface of one shard replica.
///
/// Implemented in-process by [`LocalReplica`] and over HTTP by the service crate.
pub trait Replica: Send + Sync {
    fn endpoint(&self) -> &str;
    /// Applies contiguous entries and returns the new watermark.
    fn apply(&self, entries: &[LogEntry]) -> Result<u64, ReplicaError>;
    fn log(&self, from_seq: u64, limit: usize) -> Result<Vec<LogEntry>, ReplicaError>;
    fn snapshot(&self) -> Result<SnapshotImage, ReplicaError>;
    fn install(&self, image: SnapshotImage) -> Result<(), ReplicaError>;
    fn search(&self, q: &QuerySpec) -> Result<SearchResult, ReplicaError>;
    fn health(&self) -> Result<ReplicaHealth, ReplicaError>;
    /// Committed records for the given keys; absent keys are omitted.
    fn lookup(&self, keys: &[RecordKey]) -> Result<Vec<MetadataRecord>, ReplicaError>;
    fn inventory(&self, source_node: Option<&str>) -> Result<Vec<InventoryItem>, ReplicaError>;
    fn checkpoint(&self) -> Result<(), ReplicaError>;
}

/// An in-process replica with a kill switch for fault injection.
pub struct LocalReplica {
    endpoint: String,
    index: Index,
    down: AtomicBool,
}

impl LocalReplica {
    pub fn in_memory(endpoint: impl Into<String>) -> Self {
        Self::with_index(endpoint, Index::in_memory())
    }

    pub fn open(endpoint: impl Into<String>, dir: &Path) -> Result<Self, IndexError> {
        Ok(Self::with_index(endpoint, Index::open(dir)?))
    }

    pub fn with_index(endpoint: impl Into<String>, index: Index) -> Self {
        Self { endpoint: endpoint.into(), index, down: AtomicBool::new(false) }
    }

    pub fn index(&self) -> &Index {
        &self.index
    }

    /// Simulates a crashed or partitioned replica: every RPC fails until revived.
    pub fn kill(&self) {
        self.down.store(true, Ordering::SeqCst);
    }

    pub fn revive(&self) {
        self.down.store(false, Ordering::SeqCst);
    }

    pub fn is_killed(&self) -> bool {
        self.down.load(Ordering::SeqCst)
    }

    fn reachable(&self) -> Result<&Index, ReplicaError> {
        if self.is_killed() {
            Err(ReplicaError::Unreachable(self.endpoint.clone()))
        } else {
            Ok(&self.index)
        }
    }
}

impl Replica for LocalReplica {
    fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn apply(&self, entries: &[LogEntry]) -> Result<u64, ReplicaError> {
        let index = self.reachable()?;
        let mut watermark = index.last_seq();
        for entry in entries {
            watermark = index.apply(entry)?;
        }
        Ok(watermark)
    }

    fn log(&self, from_seq: u64, limit: usize) -> Result<Vec<LogEntry>, ReplicaError> {
        Ok(self.reachable()?.log_since(from_seq, limit))
    }

    fn snapshot(&self) -> Result<SnapshotImage, ReplicaError> {
        Ok(self.reachable()?.export())
    }

    fn install(&self, image: SnapshotImage) -> Result<(), ReplicaError> {
        Ok(self.reachable()?.install(image)?)
    }

    fn search(&self, q: &QuerySpec) -> Result<SearchResult, ReplicaError> {
        self.reachable()?.search(q).map_err(|e| ReplicaError::Rejected(e.to_string()))
    }

    fn health(&self) -> Result<ReplicaHealth, ReplicaError> {
        Ok(ReplicaHealth { state: ReplicaState::Live, watermark: self.reachable()?.last_seq() })
    }

    fn lookup(&self, keys: &[RecordKey]) -> Result<Vec<MetadataRecord>, ReplicaError> {
        let snap = self.reachable()?.snapshot();
        Ok(keys.iter().filter_map(|k| snap.get(k)).collect())
    }

    fn inventory(&self, source_node: Option<&str>) -> Result<Vec<InventoryItem>, ReplicaError> {
        let snap = self.reachable()?.snapshot();
        Ok(snap.inventory(source_node).into_iter().map(|(key, digest)| InventoryItem { key, digest }).collect())
    }

    fn checkpoint(&self) -> Result<(), ReplicaError> {
        Ok(self.reachable()?.checkpoint()?)
    }
}
