//! Pull-based synchronisation with source index nodes.
//!
//! - [`Harvester::full_harvest`] pages through everything a source holds.
//! - [`Harvester::incremental_sync`] re-reads from `cursor - skew_epsilon_ms`
//!   and keeps only strictly newer `(version, timestamp_ms)` pairs, so the
//!   overlap window costs fetches but never duplicate writes.
//! - [`Harvester::reconcile`] diffs the source inventory against local digests
//!   to apply deletions and repair silent rewrites.
//!
//! Pages are requested keyset-style: each request starts at the last timestamp
//! seen and skips the records already taken at exactly that timestamp, so
//! records moving to the end of the order between pages are not skipped.

mod cursor;
mod scheduler;
mod source;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use cursor::{CursorStore, HarvestCursor};
pub use scheduler::{Clock, CycleKind, ManualClock, Scheduler, SourceTask, SystemClock, TaskStatus};
pub use source::{harvest_order, HarvestPage, InventoryPage, PageRequest, SourceClient, SourceError, OPEN_END_MS};

use crate::cluster::{Cluster, ClusterError};
use crate::index::WriteOp;
use crate::model::{ContentDigest, MetadataRecord, RecordKey};

pub const DEFAULT_PAGE_SIZE: usize = 100;
pub const DEFAULT_POLL_INTERVAL_MS: u64 = 60_000;
pub const DEFAULT_SKEW_EPSILON_MS: i64 = 60_000;
pub const DEFAULT_RECONCILE_EVERY: u64 = 10;

fn default_page_size() -> usize {
    DEFAULT_PAGE_SIZE
}
fn default_poll_interval_ms() -> u64 {
    DEFAULT_POLL_INTERVAL_MS
}
fn default_skew_epsilon_ms() -> i64 {
    DEFAULT_SKEW_EPSILON_MS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceNodeConfig {
    pub source_id: String,
    pub base_url: String,
    #[serde(default = "default_page_size")]
    pub page_size: usize,
    #[serde(default = "default_poll_interval_ms")]
    pub poll_interval_ms: u64,
    #[serde(default = "default_skew_epsilon_ms")]
    pub skew_epsilon_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SourceConfigError {
    #[error("source id {0:?} must be non-empty [A-Za-z0-9_.-] and not start with '.'")]
    BadSourceId(String),
    #[error("source {0}: page_size must be at least 1")]
    BadPageSize(String),
    #[error("source {0}: skew_epsilon_ms must be non-negative")]
    BadSkew(String),
    #[error("source {0}: poll_interval_ms must be at least 1")]
    BadPollInterval(String),
}

impl SourceNodeConfig {
    pub fn new(source_id: impl Into<String>, base_url: impl Into<String>) -> Self {
        Self {
            source_id: source_id.into(),
            base_url: base_url.into(),
            page_size: DEFAULT_PAGE_SIZE,
            poll_interval_ms: DEFAULT_POLL_INTERVAL_MS,
            skew_epsilon_ms: DEFAULT_SKEW_EPSILON_MS,
        }
    }

    pub fn validate(&self) -> Result<(), SourceConfigError> {
        let id = &self.source_id;
        let id_ok = !id.is_empty()
            && !id.starts_with('.')
            && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'));
        if !id_ok {
            return Err(SourceConfigError::BadSourceId(id.clone()));
        }
        if self.page_size == 0 {
            return Err(SourceConfigError::BadPageSize(id.clone()));
        }
        if self.skew_epsilon_ms < 0 {
            return Err(SourceConfigError::BadSkew(id.clone()));
        }
        if self.poll_interval_ms == 0 {
            return Err(SourceConfigError::BadPollInterval(id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarvestError {
    #[error("source {source_id} unreachable: {reason}")]
    SourceUnreachable { source_id: String, reason: String },
    #[error("source {source_id} returned an out-of-order page: {detail}")]
    PageOrderViolation { source_id: String, detail: String },
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("cursor store: {0}")]
    Cursor(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SyncStats {
    pub pages: u64,
    pub fetched: u64,
    pub upserted: u64,
    pub skipped: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReconcileStats {
    pub inventory: u64,
    pub deleted: u64,
    pub repaired: u64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum WriteRule {
    /// Strictly newer `(version, timestamp_ms)` only.
    Newer,
    /// Newer, or same freshness from the same source with different content.
    NewerOrDrifted,
    /// The source is authoritative for records it owns.
    SourceAuthority,
}

fn should_write(local: Option<&MetadataRecord>, incoming: &MetadataRecord, rule: WriteRule) -> bool {
    let Some(local) = local else {
        return true;
    };
    let newer = incoming.freshness() > local.freshness();
    let same_source = local.source_node == incoming.source_node;
    if !same_source {
        // Two sources publishing the same key: higher (version, timestamp) wins.
        tracing::warn!(key = %incoming.key(), held_by = %local.source_node, offered_by = %incoming.source_node,
            replace = newer, "federation anomaly: key claimed by two sources");
        return newer;
    }
    match rule {
        WriteRule::Newer => newer,
        WriteRule::NewerOrDrifted => {
            newer || (incoming.freshness() == local.freshness() && incoming.digest() != local.digest())
        }
        WriteRule::SourceAuthority => incoming.digest() != local.digest(),
    }
}

fn unreachable(src: &SourceNodeConfig, e: SourceError) -> HarvestError {
    HarvestError::SourceUnreachable { source_id: src.source_id.clone(), reason: e.to_string() }
}

/// Writes harvested records into a [`Cluster`] and tracks cursors.
pub struct Harvester {
    cluster: Arc<Cluster>,
    cursors: CursorStore,
}

impl Harvester {
    pub fn new(cluster: Arc<Cluster>, cursors: CursorStore) -> Self {
        Self { cluster, cursors }
    }

    pub fn cluster(&self) -> &Arc<Cluster> {
        &self.cluster
    }

    pub fn cursors(&self) -> &CursorStore {
        &self.cursors
    }

    /// Pulls every record from time 0. The cursor is persisted after each page,
    /// so an interrupted harvest resumes from there via incremental sync.
    pub fn full_harvest(&self, src: &SourceNodeConfig, client: &dyn SourceClient) -> Result<SyncStats, HarvestError> {
        let stats = self.pull(src, client, 0, WriteRule::NewerOrDrifted, true)?;
        if self.cursors.get(&src.source_id).is_none() {
            self.cursors.advance(&src.source_id, 0)?;
        }
        tracing::info!(source = %src.source_id, ?stats, "full harvest complete");
        Ok(stats)
    }

    /// Pulls records stamped at or after `cursor - skew_epsilon_ms`.
    ///
    /// The cursor is only advanced once the whole window has been read.
    pub fn incremental_sync(
        &self,
        src: &SourceNodeConfig,
        client: &dyn SourceClient,
    ) -> Result<SyncStats, HarvestError> {
        let cursor = self.cursors.get(&src.source_id).map_or(0, |c| c.last_sync_ms);
        let from_ms = (cursor - src.skew_epsilon_ms).max(0);
        let stats = self.pull(src, client, from_ms, WriteRule::Newer, false)?;
        tracing::debug!(source = %src.source_id, from_ms, ?stats, "incremental sync complete");
        Ok(stats)
    }

    fn pull(
        &self,
        src: &SourceNodeConfig,
        client: &dyn SourceClient,
        start_ms: i64,
        rule: WriteRule,
        persist_per_page: bool,
    ) -> Result<SyncStats, HarvestError> {
        let mut stats = SyncStats::default();
        let mut from_ms = start_ms;
        let mut skip = 0;
        let mut max_seen: Option<i64> = None;

        loop {
            let req = PageRequest { from_ms, to_ms: OPEN_END_MS, offset: skip, limit: src.page_size };
            let page = client.search_page(req).map_err(|e| unreachable(src, e))?;
            if page.docs.is_empty() {
                break;
            }
            // Across pages only the window start is checked: a record added at the
            // boundary timestamp can legitimately reappear, and dedup absorbs it.
            let misordered = page.docs.windows(2).find(|w| !harvest_order(&w[0], &w[1]).is_lt());
            if let Some(w) = misordered {
                return Err(HarvestError::PageOrderViolation {
                    source_id: src.source_id.clone(),
                    detail: format!("{} precedes {}", w[0].key(), w[1].key()),
                });
            }
            if let Some(early) = page.docs.iter().find(|d| d.timestamp_ms < from_ms) {
                return Err(HarvestError::PageOrderViolation {
                    source_id: src.source_id.clone(),
                    detail: format!("{} stamped {} before window start {from_ms}", early.key(), early.timestamp_ms),
                });
            }
            stats.pages += 1;
            stats.fetched += page.docs.len() as u64;

            let (written, skipped) = self.write_newer(page.docs.clone(), rule)?;
            stats.upserted += written;
            stats.skipped += skipped;

            let last_ts = page.docs.last().unwrap().timestamp_ms;
            let at_last = page.docs.iter().rev().take_while(|d| d.timestamp_ms == last_ts).count();
            skip = if last_ts == from_ms { skip + at_last } else { at_last };
            from_ms = last_ts;
            max_seen = Some(max_seen.map_or(last_ts, |m| m.max(last_ts)));
            if persist_per_page {
                self.cursors.advance(&src.source_id, last_ts)?;
            }
            if page.docs.len() < src.page_size {
                break;
            }
        }
        if let Some(ms) = max_seen {
            self.cursors.advance(&src.source_id, ms)?;
        }
        Ok(stats)
    }

    /// Upserts the records that win against the local copy, then commits.
    fn write_newer(&self, docs: Vec<MetadataRecord>, rule: WriteRule) -> Result<(u64, u64), HarvestError> {
        let keys: Vec<RecordKey> = docs.iter().map(MetadataRecord::key).collect();
        let local = self.cluster.lookup(&keys)?;
        let total = docs.len() as u64;
        let ops: Vec<WriteOp> =
            docs.into_iter().filter(|d| should_write(local.get(&d.key()), d, rule)).map(WriteOp::upsert).collect();
        let written = ops.len() as u64;
        if !ops.is_empty() {
            self.cluster.apply_batch(ops)?;
            self.cluster.commit()?;
        }
        Ok((written, total - written))
    }

    /// Makes the local records attributed to `src` equal the source inventory.
    ///
    /// All source reads happen before any local mutation.
    pub fn reconcile(&self, src: &SourceNodeConfig, client: &dyn SourceClient) -> Result<ReconcileStats, HarvestError> {
        let mut remote: BTreeMap<RecordKey, ContentDigest> = BTreeMap::new();
        let mut offset = 0;
        loop {
            let page = client.inventory_page(offset, src.page_size).map_err(|e| unreachable(src, e))?;
            let n = page.items.len();
            remote.extend(page.items.into_iter().map(|i| (i.key, i.digest)));
            offset += n;
            if n == 0 || offset as u64 >= page.num_found {
                break;
            }
        }

        let local: HashMap<RecordKey, ContentDigest> =
            self.cluster.inventory(Some(&src.source_id))?.into_iter().map(|i| (i.key, i.digest)).collect();

        let stale: Vec<RecordKey> =
            remote.iter().filter(|(k, d)| local.get(*k) != Some(*d)).map(|(k, _)| k.clone()).collect();
        let mut refetched = Vec::with_capacity(stale.len());
        for chunk in stale.chunks(src.page_size) {
            refetched.extend(client.fetch(chunk).map_err(|e| unreachable(src, e))?);
        }

        let mut stats = ReconcileStats { inventory: remote.len() as u64, ..ReconcileStats::default() };
        let mut deletes: Vec<WriteOp> =
            local.keys().filter(|k| !remote.contains_key(*k)).cloned().map(WriteOp::delete).collect();
        deletes.sort_by_key(|op| op.key());
        stats.deleted = deletes.len() as u64;
        if !deletes.is_empty() {
            self.cluster.apply_batch(deletes)?;
        }

        let keys: Vec<RecordKey> = refetched.iter().map(MetadataRecord::key).collect();
        let current = self.cluster.lookup(&keys)?;
        let repairs: Vec<WriteOp> = refetched
            .into_iter()
            .filter(|d| should_write(current.get(&d.key()), d, WriteRule::SourceAuthority))
            .map(WriteOp::upsert)
            .collect();
        stats.repaired = repairs.len() as u64;
        if !repairs.is_empty() {
            self.cluster.apply_batch(repairs)?;
        }
        if stats.deleted + stats.repaired > 0 {
            self.cluster.commit()?;
        }
        tracing::info!(source = %src.source_id, ?stats, "reconcile complete");
        Ok(stats)
    }
}
