//! Sharding, replication and scatter-gather reads.
//!
//! The coordinator owns one op log per shard and is the only writer. A write is
//! routed to its shard, given the shard's next sequence number, appended to the
//! shard log and applied to every `Live` replica. A replica that fails an apply
//! drops out (`Down` if unreachable, `CatchingUp` otherwise) and is only read
//! again after it has replayed the log from its watermark, or, when the log no
//! longer reaches back that far, after bootstrapping from a peer's snapshot.
//!
//! Reads fan out to one `Live` replica per shard and fail closed: if any shard
//! has no `Live` replica the query errors instead of returning a partial answer.

mod merge;
mod replica;
mod route;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub use merge::merge_results;
pub use replica::{InventoryItem, LocalReplica, Replica, ReplicaError, ReplicaHealth, ReplicaState};
pub use route::route;

use crate::index::{IndexError, LogEntry, QueryError, QuerySpec, SearchResult, SnapshotImage, WriteOp};
use crate::model::{MetadataRecord, RecordKey, RecordType};

pub const DEFAULT_NUM_SHARDS: usize = 3;
pub const DEFAULT_REPLICATION_FACTOR: usize = 3;
/// Shard-log entries kept for catch-up before older ones are dropped.
pub const DEFAULT_LOG_RETENTION: usize = 1_000_000;
const REPLAY_CHUNK: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClusterError {
    #[error("shard {shard} has no live replica; write rejected")]
    ShardUnavailable { shard: usize },
    #[error("shard {shard} has no live replica; refusing a partial result")]
    IncompleteCoverage { shard: usize },
    #[error("shard {shard} log starts at {first_retained}, replica {slot} is at {watermark}")]
    LogTruncated { shard: usize, slot: usize, watermark: u64, first_retained: u64 },
    #[error("replica {slot} of shard {shard} is {state:?}, not catching up")]
    NotCatchingUp { shard: usize, slot: usize, state: ReplicaState },
    #[error("replica {slot} of shard {shard} is ahead of the shard head ({watermark} > {head})")]
    Diverged { shard: usize, slot: usize, watermark: u64, head: u64 },
    #[error("shard {shard} has no live peer to copy a snapshot from")]
    NoLivePeer { shard: usize },
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("shard {shard} replica {slot}: {source}")]
    Replica { shard: usize, slot: usize, source: ReplicaError },
}

/// Acknowledgement of a write to one shard.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    pub shard: usize,
    /// Sequence number of the last entry written.
    pub seq: u64,
    pub replicas_applied: usize,
}

/// Outcome of bringing a straggler back to the shard head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CatchUp {
    pub watermark: u64,
    pub replayed: u64,
    pub bootstrapped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaStatus {
    pub shard: usize,
    pub slot: usize,
    pub endpoint: String,
    pub state: ReplicaState,
    pub watermark: u64,
}

/// Point-in-time view of topology, health and watermarks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterState {
    pub num_shards: usize,
    pub replication_factor: usize,
    /// Shard index -> replica endpoints, by slot.
    pub assignments: BTreeMap<usize, Vec<String>>,
    /// Head sequence number of each shard log.
    pub heads: Vec<u64>,
    pub replicas: Vec<ReplicaStatus>,
}

impl ClusterState {
    pub fn health(&self) -> BTreeMap<String, ReplicaState> {
        self.replicas.iter().map(|r| (r.endpoint.clone(), r.state)).collect()
    }

    pub fn watermark(&self, shard: usize, slot: usize) -> Option<u64> {
        self.replicas.iter().find(|r| r.shard == shard && r.slot == slot).map(|r| r.watermark)
    }

    pub fn state_of(&self, shard: usize, slot: usize) -> Option<ReplicaState> {
        self.replicas.iter().find(|r| r.shard == shard && r.slot == slot).map(|r| r.state)
    }
}

struct Slot {
    replica: Arc<dyn Replica>,
    state: Mutex<ReplicaState>,
    watermark: AtomicU64,
}

impl Slot {
    fn state(&self) -> ReplicaState {
        *self.state.lock()
    }

    fn set_state(&self, state: ReplicaState) {
        let mut current = self.state.lock();
        if *current != state {
            tracing::info!(endpoint = self.replica.endpoint(), from = ?*current, to = ?state, "replica state change");
            *current = state;
        }
    }

    fn is_live(&self) -> bool {
        self.state() == ReplicaState::Live
    }

    /// Records a failed RPC: unreachable replicas go `Down`, anything else must catch up.
    fn demote(&self, err: &ReplicaError) {
        tracing::warn!(endpoint = self.replica.endpoint(), error = %err, "replica request failed");
        match err {
            ReplicaError::Unreachable(_) => self.set_state(ReplicaState::Down),
            _ => self.set_state(ReplicaState::CatchingUp),
        }
    }
}

struct ShardLog {
    entries: VecDeque<LogEntry>,
    head: u64,
    retention: usize,
}

impl ShardLog {
    fn first_retained(&self) -> u64 {
        self.head + 1 - self.entries.len() as u64
    }

    fn push(&mut self, op: WriteOp) -> LogEntry {
        self.head += 1;
        let entry = LogEntry::new(self.head, op);
        if self.entries.len() == self.retention {
            self.entries.pop_front();
        }
        self.entries.push_back(entry.clone());
        entry
    }

    /// Entries after `watermark`, or `None` if some of them were dropped.
    fn since(&self, watermark: u64) -> Option<Vec<LogEntry>> {
        if watermark + 1 < self.first_retained() {
            return None;
        }
        let skip = (watermark + 1 - self.first_retained()) as usize;
        Some(self.entries.iter().skip(skip).cloned().collect())
    }
}

struct Shard {
    slots: Vec<Slot>,
    log: Mutex<ShardLog>,
}

/// The coordinator: routes writes, replicates them, and answers queries.
pub struct Cluster {
    shards: Vec<Shard>,
    replication_factor: usize,
    read_rotation: AtomicUsize,
}

/// In-memory local replicas, `grid[shard][slot]`.
pub fn local_grid(num_shards: usize, replication_factor: usize) -> Vec<Vec<Arc<LocalReplica>>> {
    (0..num_shards)
        .map(|s| {
            (0..replication_factor)
                .map(|r| Arc::new(LocalReplica::in_memory(format!("local://shard{s}/replica{r}"))))
                .collect()
        })
        .collect()
}

/// Persistent local replicas under `dir/shard-{s}/replica-{r}`.
pub fn open_local_grid(
    dir: &Path,
    num_shards: usize,
    replication_factor: usize,
) -> Result<Vec<Vec<Arc<LocalReplica>>>, IndexError> {
    (0..num_shards)
        .map(|s| {
            (0..replication_factor)
                .map(|r| {
                    let path = dir.join(format!("shard-{s}")).join(format!("replica-{r}"));
                    LocalReplica::open(format!("local://shard{s}/replica{r}"), &path).map(Arc::new)
                })
                .collect()
        })
        .collect()
}

impl Cluster {
    /// Builds a coordinator over `replicas[shard][slot]`.
    ///
    /// Each shard head starts at the highest watermark its replicas report;
    /// replicas behind it start `CatchingUp`, unreachable ones `Down`.
    pub fn new(replicas: Vec<Vec<Arc<dyn Replica>>>) -> Result<Self, ClusterError> {
        Self::with_retention(replicas, DEFAULT_LOG_RETENTION)
    }

    pub fn with_retention(replicas: Vec<Vec<Arc<dyn Replica>>>, retention: usize) -> Result<Self, ClusterError> {
        let replication_factor = replicas.first().map(Vec::len).unwrap_or(0);
        if replicas.is_empty() || replication_factor == 0 {
            return Err(ClusterError::Topology("need at least one shard and one replica".into()));
        }
        if let Some(bad) = replicas.iter().position(|r| r.len() != replication_factor) {
            return Err(ClusterError::Topology(format!(
                "shard {bad} has {} replicas, expected {replication_factor}",
                replicas[bad].len()
            )));
        }
        if retention == 0 {
            return Err(ClusterError::Topology("log retention must be positive".into()));
        }

        let shards = replicas
            .into_iter()
            .map(|group| {
                let probes: Vec<Option<u64>> = group.iter().map(|r| r.health().ok().map(|h| h.watermark)).collect();
                let head = probes.iter().flatten().copied().max().unwrap_or(0);
                let slots = group
                    .into_iter()
                    .zip(probes)
                    .map(|(replica, probe)| {
                        let state = match probe {
                            None => ReplicaState::Down,
                            Some(w) if w == head => ReplicaState::Live,
                            Some(_) => ReplicaState::CatchingUp,
                        };
                        Slot { replica, state: Mutex::new(state), watermark: AtomicU64::new(probe.unwrap_or(0)) }
                    })
                    .collect();
                Shard { slots, log: Mutex::new(ShardLog { entries: VecDeque::new(), head, retention }) }
            })
            .collect();

        let cluster = Self { shards, replication_factor, read_rotation: AtomicUsize::new(0) };
        cluster.recover_all();
        Ok(cluster)
    }

    pub fn from_local(grid: &[Vec<Arc<LocalReplica>>]) -> Result<Self, ClusterError> {
        Self::new(grid.iter().map(|g| g.iter().map(|r| r.clone() as Arc<dyn Replica>).collect()).collect())
    }

    pub fn in_memory(num_shards: usize, replication_factor: usize) -> Result<Self, ClusterError> {
        Self::from_local(&local_grid(num_shards, replication_factor))
    }

    pub fn num_shards(&self) -> usize {
        self.shards.len()
    }

    pub fn replication_factor(&self) -> usize {
        self.replication_factor
    }

    pub fn route(&self, record_type: RecordType, id: &str) -> usize {
        route(record_type, id, self.shards.len())
    }

    pub fn head(&self, shard: usize) -> u64 {
        self.shards[shard].log.lock().head
    }

    pub fn replica(&self, shard: usize, slot: usize) -> Arc<dyn Replica> {
        self.shards[shard].slots[slot].replica.clone()
    }

    pub fn replica_state(&self, shard: usize, slot: usize) -> ReplicaState {
        self.shards[shard].slots[slot].state()
    }

    pub fn state(&self) -> ClusterState {
        let mut assignments = BTreeMap::new();
        let mut heads = Vec::with_capacity(self.shards.len());
        let mut replicas = Vec::new();
        for (s, shard) in self.shards.iter().enumerate() {
            heads.push(shard.log.lock().head);
            assignments.insert(s, shard.slots.iter().map(|slot| slot.replica.endpoint().to_string()).collect());
            for (r, slot) in shard.slots.iter().enumerate() {
                replicas.push(ReplicaStatus {
                    shard: s,
                    slot: r,
                    endpoint: slot.replica.endpoint().to_string(),
                    state: slot.state(),
                    watermark: slot.watermark.load(Ordering::SeqCst),
                });
            }
        }
        ClusterState {
            num_shards: self.shards.len(),
            replication_factor: self.replication_factor,
            assignments,
            heads,
            replicas,
        }
    }

    // ---- write path ----

    pub fn apply_write(&self, op: WriteOp) -> Result<Ack, ClusterError> {
        let shard = match op.key() {
            Some(key) => self.route(key.record_type, &key.id),
            None => return Err(ClusterError::Topology("commit is a cluster-wide operation".into())),
        };
        self.write_shard(shard, vec![op])
    }

    pub fn upsert(&self, record: MetadataRecord) -> Result<Ack, ClusterError> {
        self.apply_write(WriteOp::upsert(record))
    }

    pub fn delete(&self, key: RecordKey) -> Result<Ack, ClusterError> {
        self.apply_write(WriteOp::delete(key))
    }

    /// Writes a batch, one log append per shard. Per-shard order is preserved.
    ///
    /// Every shard is attempted; the first error is returned after the others ran.
    pub fn apply_batch(&self, ops: Vec<WriteOp>) -> Result<Vec<Ack>, ClusterError> {
        let mut by_shard: BTreeMap<usize, Vec<WriteOp>> = BTreeMap::new();
        for op in ops {
            let key = op.key().ok_or_else(|| ClusterError::Topology("commit is a cluster-wide operation".into()))?;
            by_shard.entry(self.route(key.record_type, &key.id)).or_default().push(op);
        }
        if let Some(&shard) = by_shard.keys().find(|&&s| !self.shards[s].slots.iter().any(Slot::is_live)) {
            return Err(ClusterError::ShardUnavailable { shard });
        }
        collect_all(by_shard.into_iter().map(|(shard, ops)| self.write_shard(shard, ops)))
    }

    /// Appends a commit to every shard log, publishing all earlier writes.
    pub fn commit(&self) -> Result<Vec<Ack>, ClusterError> {
        collect_all((0..self.shards.len()).map(|s| self.write_shard(s, vec![WriteOp::Commit])))
    }

    fn write_shard(&self, shard_idx: usize, ops: Vec<WriteOp>) -> Result<Ack, ClusterError> {
        let shard = &self.shards[shard_idx];
        let mut log = shard.log.lock();
        let live: Vec<&Slot> = shard.slots.iter().filter(|s| s.is_live()).collect();
        if live.is_empty() {
            return Err(ClusterError::ShardUnavailable { shard: shard_idx });
        }
        let entries: Vec<LogEntry> = ops.into_iter().map(|op| log.push(op)).collect();
        let head = log.head;

        let outcomes: Vec<Result<u64, ReplicaError>> = if live.len() == 1 {
            vec![live[0].replica.apply(&entries)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = live.iter().map(|slot| scope.spawn(|| slot.replica.apply(&entries))).collect();
                handles.into_iter().map(|h| h.join().expect("replica apply panicked")).collect()
            })
        };

        let mut applied = 0;
        for (slot, outcome) in live.iter().zip(outcomes) {
            match outcome {
                Ok(watermark) => {
                    slot.watermark.store(watermark, Ordering::SeqCst);
                    applied += 1;
                }
                Err(e) => slot.demote(&e),
            }
        }
        if applied == 0 {
            return Err(ClusterError::ShardUnavailable { shard: shard_idx });
        }
        Ok(Ack { shard: shard_idx, seq: head, replicas_applied: applied })
    }

    // ---- recovery ----

    /// Replays the shard log from the replica's watermark and marks it `Live`.
    pub fn catch_up(&self, shard_idx: usize, slot_idx: usize) -> Result<CatchUp, ClusterError> {
        let shard = &self.shards[shard_idx];
        let slot = &shard.slots[slot_idx];
        let log = shard.log.lock();
        match slot.state() {
            ReplicaState::CatchingUp => {}
            ReplicaState::Live => {
                return Ok(CatchUp {
                    watermark: slot.watermark.load(Ordering::SeqCst),
                    replayed: 0,
                    bootstrapped: false,
                })
            }
            state => return Err(ClusterError::NotCatchingUp { shard: shard_idx, slot: slot_idx, state }),
        }
        let rpc_err = |e: ReplicaError| {
            slot.demote(&e);
            ClusterError::Replica { shard: shard_idx, slot: slot_idx, source: e }
        };

        let watermark = slot.replica.health().map_err(rpc_err)?.watermark;
        if watermark > log.head {
            return Err(ClusterError::Diverged { shard: shard_idx, slot: slot_idx, watermark, head: log.head });
        }
        let pending = match log.since(watermark) {
            Some(entries) => entries,
            None => self
                .fill_from_peer(shard, slot_idx, watermark, log.first_retained())
                .map(|mut gap| {
                    gap.extend(log.entries.iter().cloned());
                    gap
                })
                .ok_or(ClusterError::LogTruncated {
                    shard: shard_idx,
                    slot: slot_idx,
                    watermark,
                    first_retained: log.first_retained(),
                })?,
        };
        for chunk in pending.chunks(REPLAY_CHUNK) {
            let w = slot.replica.apply(chunk).map_err(rpc_err)?;
            slot.watermark.store(w, Ordering::SeqCst);
        }
        slot.watermark.store(log.head, Ordering::SeqCst);
        slot.set_state(ReplicaState::Live);
        Ok(CatchUp { watermark: log.head, replayed: pending.len() as u64, bootstrapped: false })
    }

    /// Entries `(watermark, first_retained)` from a live peer's own retained log.
    fn fill_from_peer(
        &self,
        shard: &Shard,
        slot_idx: usize,
        watermark: u64,
        first_retained: u64,
    ) -> Option<Vec<LogEntry>> {
        let needed = (first_retained - watermark - 1) as usize;
        shard.slots.iter().enumerate().filter(|(i, s)| *i != slot_idx && s.is_live()).find_map(|(_, peer)| {
            let entries = peer.replica.log(watermark + 1, needed).ok()?;
            let contiguous =
                entries.len() == needed && entries.iter().enumerate().all(|(k, e)| e.seq == watermark + 1 + k as u64);
            contiguous.then_some(entries)
        })
    }

    /// Copies a live peer's full state onto the replica, then replays anything newer.
    pub fn bootstrap(&self, shard_idx: usize, slot_idx: usize) -> Result<CatchUp, ClusterError> {
        let shard = &self.shards[shard_idx];
        let slot = &shard.slots[slot_idx];
        let log = shard.log.lock();
        let rpc_err = |at: usize, e: ReplicaError| {
            shard.slots[at].demote(&e);
            ClusterError::Replica { shard: shard_idx, slot: at, source: e }
        };
        let (peer_idx, peer) = shard
            .slots
            .iter()
            .enumerate()
            .find(|(i, s)| *i != slot_idx && s.is_live())
            .ok_or(ClusterError::NoLivePeer { shard: shard_idx })?;
        let image = peer.replica.snapshot().map_err(|e| rpc_err(peer_idx, e))?;
        let image_seq = image.seq;
        slot.replica.install(image).map_err(|e| rpc_err(slot_idx, e))?;
        let rest = log.since(image_seq).unwrap_or_default();
        for chunk in rest.chunks(REPLAY_CHUNK) {
            slot.replica.apply(chunk).map_err(|e| rpc_err(slot_idx, e))?;
        }
        slot.watermark.store(log.head, Ordering::SeqCst);
        slot.set_state(ReplicaState::Live);
        tracing::info!(shard = shard_idx, slot = slot_idx, seq = image_seq, "replica bootstrapped from snapshot");
        Ok(CatchUp { watermark: log.head, replayed: rest.len() as u64, bootstrapped: true })
    }

    /// `catch_up`, falling back to `bootstrap` when the log cannot cover the gap.
    pub fn recover(&self, shard: usize, slot: usize) -> Result<CatchUp, ClusterError> {
        match self.catch_up(shard, slot) {
            Err(ClusterError::LogTruncated { .. } | ClusterError::Diverged { .. }) => self.bootstrap(shard, slot),
            other => other,
        }
    }

    fn recover_all(&self) {
        for (s, shard) in self.shards.iter().enumerate() {
            for (r, slot) in shard.slots.iter().enumerate() {
                if slot.state() == ReplicaState::CatchingUp {
                    if let Err(e) = self.recover(s, r) {
                        tracing::warn!(shard = s, slot = r, error = %e, "replica recovery failed");
                    }
                }
            }
        }
    }

    /// Marks a replica `Down` as if its health probe had failed.
    pub fn mark_down(&self, shard: usize, slot: usize) {
        self.shards[shard].slots[slot].set_state(ReplicaState::Down);
    }

    /// Moves a `Down` replica to `CatchingUp` without waiting for a health probe.
    pub fn begin_recovery(&self, shard: usize, slot: usize) {
        let slot = &self.shards[shard].slots[slot];
        if slot.state() == ReplicaState::Down {
            slot.set_state(ReplicaState::CatchingUp);
        }
    }

    /// Probes every replica, updates states and recovers returning replicas.
    pub fn check_health(&self) -> ClusterState {
        for shard in &self.shards {
            for slot in &shard.slots {
                let probe = slot.replica.health();
                let log = shard.log.lock();
                match (probe, slot.state()) {
                    (Err(_), _) => slot.set_state(ReplicaState::Down),
                    (Ok(_), ReplicaState::Down) => slot.set_state(ReplicaState::CatchingUp),
                    // A replica process that restarted without its data reports a lower watermark.
                    (Ok(h), ReplicaState::Live) if h.watermark != log.head => {
                        slot.watermark.store(h.watermark, Ordering::SeqCst);
                        slot.set_state(ReplicaState::CatchingUp);
                    }
                    _ => {}
                }
            }
        }
        self.recover_all();
        self.state()
    }

    // ---- read path ----

    /// Fans `q` out to one live replica per shard and merges the answers.
    pub fn scatter_gather(&self, q: &QuerySpec) -> Result<SearchResult, ClusterError> {
        q.validate()?;
        let shard_q = QuerySpec { offset: 0, limit: q.offset + q.limit, ..q.clone() };
        let rotation = self.read_rotation.fetch_add(1, Ordering::Relaxed);
        let parts = self.per_shard(|s| self.read_shard(s, rotation, |r| r.search(&shard_q)))?;
        Ok(merge_results(parts, q.offset, q.limit))
    }

    fn per_shard<T: Send>(&self, f: impl Fn(usize) -> Result<T, ClusterError> + Sync) -> Result<Vec<T>, ClusterError> {
        if self.shards.len() == 1 {
            return Ok(vec![f(0)?]);
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..self.shards.len())
                .map(|s| {
                    let f = &f;
                    scope.spawn(move || f(s))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("shard request panicked")).collect()
        })
    }

    /// Runs `f` against live replicas of a shard, starting at `rotation`, until one answers.
    fn read_shard<T>(
        &self,
        shard_idx: usize,
        rotation: usize,
        f: impl Fn(&dyn Replica) -> Result<T, ReplicaError>,
    ) -> Result<T, ClusterError> {
        let slots = &self.shards[shard_idx].slots;
        for k in 0..slots.len() {
            let slot = &slots[(rotation + k) % slots.len()];
            if !slot.is_live() {
                continue;
            }
            match f(slot.replica.as_ref()) {
                Ok(v) => return Ok(v),
                Err(e @ ReplicaError::Unreachable(_)) => slot.demote(&e),
                Err(e) => {
                    return Err(ClusterError::Replica {
                        shard: shard_idx,
                        slot: (rotation + k) % slots.len(),
                        source: e,
                    })
                }
            }
        }
        Err(ClusterError::IncompleteCoverage { shard: shard_idx })
    }

    /// Committed records for `keys`, read from one live replica per shard.
    pub fn lookup(&self, keys: &[RecordKey]) -> Result<HashMap<RecordKey, MetadataRecord>, ClusterError> {
        let mut by_shard: BTreeMap<usize, Vec<RecordKey>> = BTreeMap::new();
        for key in keys {
            by_shard.entry(self.route(key.record_type, &key.id)).or_default().push(key.clone());
        }
        let rotation = self.read_rotation.fetch_add(1, Ordering::Relaxed);
        let mut found = HashMap::with_capacity(keys.len());
        for (shard, keys) in by_shard {
            for doc in self.read_shard(shard, rotation, |r| r.lookup(&keys))? {
                found.insert(doc.key(), doc);
            }
        }
        Ok(found)
    }

    /// Committed `(key, digest)` of every record attributed to `source_node` (all if `None`).
    pub fn inventory(&self, source_node: Option<&str>) -> Result<Vec<InventoryItem>, ClusterError> {
        let rotation = self.read_rotation.fetch_add(1, Ordering::Relaxed);
        let parts = self.per_shard(|s| self.read_shard(s, rotation, |r| r.inventory(source_node)))?;
        let mut items: Vec<InventoryItem> = parts.into_iter().flatten().collect();
        items.sort();
        Ok(items)
    }

    pub fn doc_counts(&self) -> Result<BTreeMap<RecordType, u64>, ClusterError> {
        RecordType::ALL
            .iter()
            .map(|&t| {
                let q = QuerySpec { limit: 0, ..QuerySpec::match_all(t) };
                Ok((t, self.scatter_gather(&q)?.num_found))
            })
            .collect()
    }

    /// Full state of every replica of a shard, by slot.
    pub fn replica_images(&self, shard: usize) -> Vec<Result<SnapshotImage, ReplicaError>> {
        self.shards[shard].slots.iter().map(|s| s.replica.snapshot()).collect()
    }

    /// Checkpoints every reachable replica.
    pub fn checkpoint(&self) -> Result<(), ClusterError> {
        for (s, shard) in self.shards.iter().enumerate() {
            let _log = shard.log.lock();
            for (r, slot) in shard.slots.iter().enumerate() {
                if slot.is_live() {
                    slot.replica.checkpoint().map_err(|e| ClusterError::Replica { shard: s, slot: r, source: e })?;
                }
            }
        }
        Ok(())
    }

    /// Drops shard-log entries up to and including `seq`.
    pub fn truncate_log(&self, shard: usize, seq: u64) {
        let mut log = self.shards[shard].log.lock();
        while log.entries.front().is_some_and(|e| e.seq <= seq) {
            log.entries.pop_front();
        }
    }
}

fn collect_all<T>(results: impl Iterator<Item = Result<T, ClusterError>>) -> Result<Vec<T>, ClusterError> {
    let mut ok = Vec::new();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(ok),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn rec(id: &str, ts: i64) -> MetadataRecord {
        MetadataRecord::from_document(&json!({"type": "Dataset", "id": id, "source_node": "n1",
            "timestamp_ms": ts, "project": ["CMIP6"]}))
        .unwrap()
    }

    #[test]
    fn single_replica_write() {
        let grid = local_grid(1, 1);
        let cluster = Cluster::from_local(&grid).unwrap();
        cluster.upsert(rec("d1", 1)).unwrap();
        cluster.commit().unwrap();
        assert_eq!(grid[0][0].index().snapshot().doc_count(), 1);
    }

    #[test]
    fn topology_must_be_rectangular() {
        let grid = local_grid(2, 2);
        let mut replicas: Vec<Vec<Arc<dyn Replica>>> =
            grid.iter().map(|g| g.iter().map(|r| r.clone() as Arc<dyn Replica>).collect()).collect();
        replicas[1].pop();
        assert!(matches!(Cluster::new(replicas), Err(ClusterError::Topology(_))));
        assert!(matches!(Cluster::new(vec![]), Err(ClusterError::Topology(_))));
    }

    #[test]
    fn write_rejected_without_live_replica() {
        let grid = local_grid(1, 2);
        let cluster = Cluster::from_local(&grid).unwrap();
        grid[0][0].kill();
        grid[0][1].kill();
        assert_eq!(cluster.upsert(rec("d1", 1)), Err(ClusterError::ShardUnavailable { shard: 0 }));
        assert_eq!(cluster.upsert(rec("d1", 1)), Err(ClusterError::ShardUnavailable { shard: 0 }));
        assert_eq!(cluster.state().replicas.iter().filter(|r| r.state == ReplicaState::Down).count(), 2);
    }

    #[test]
    fn catch_up_replays_exactly_the_gap() {
        let grid = local_grid(1, 3);
        let cluster = Cluster::from_local(&grid).unwrap();
        for k in 0..10 {
            cluster.upsert(rec(&format!("d{k}"), k + 1)).unwrap();
        }
        grid[0][1].kill();
        for k in 10..60 {
            cluster.upsert(rec(&format!("d{k}"), k + 1)).unwrap();
        }
        assert_eq!(cluster.replica_state(0, 1), ReplicaState::Down);
        grid[0][1].revive();
        // The first write after the kill was the one that failed, so 50 ops are missing.
        cluster.check_health();
        assert_eq!(cluster.replica_state(0, 1), ReplicaState::Live);
        assert_eq!(grid[0][1].index().last_seq(), cluster.head(0));
    }

    #[test]
    fn catch_up_counts() {
        let grid = local_grid(1, 2);
        let cluster = Cluster::from_local(&grid).unwrap();
        cluster.upsert(rec("a", 1)).unwrap();
        cluster.mark_down(0, 1);
        for k in 0..50 {
            cluster.upsert(rec(&format!("d{k}"), k + 1)).unwrap();
        }
        assert!(matches!(cluster.catch_up(0, 1), Err(ClusterError::NotCatchingUp { .. })));
        cluster.begin_recovery(0, 1);
        let done = cluster.catch_up(0, 1).unwrap();
        assert_eq!((done.replayed, done.watermark, done.bootstrapped), (50, 51, false));
        assert_eq!(cluster.state().state_of(0, 1), Some(ReplicaState::Live));

        // Already at head: zero ops replayed.
        cluster.mark_down(0, 1);
        cluster.begin_recovery(0, 1);
        assert_eq!(cluster.catch_up(0, 1).unwrap().replayed, 0);
        assert_eq!(grid[0][1].index().last_seq(), 51);
    }

    #[test]
    fn truncated_log_falls_back_to_snapshot_bootstrap() {
        let grid = local_grid(1, 2);
        let cluster = Cluster::from_local(&grid).unwrap();
        cluster.upsert(rec("a", 1)).unwrap();
        grid[0][1].kill();
        for k in 0..20 {
            cluster.upsert(rec(&format!("d{k}"), k + 2)).unwrap();
        }
        cluster.commit().unwrap();
        cluster.truncate_log(0, cluster.head(0) - 2);
        grid[0][1].revive();
        cluster.check_health();
        // Peer logs still cover the gap, so this recovers without a snapshot.
        assert_eq!(cluster.replica_state(0, 1), ReplicaState::Live);
        assert_eq!(grid[0][1].index().export(), grid[0][0].index().export());
    }

    #[test]
    fn scatter_gather_fails_closed() {
        let grid = local_grid(3, 1);
        let cluster = Cluster::from_local(&grid).unwrap();
        grid[1][0].kill();
        let err = cluster.scatter_gather(&QuerySpec::default()).unwrap_err();
        assert_eq!(err, ClusterError::IncompleteCoverage { shard: 1 });
    }
}
