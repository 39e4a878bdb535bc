//! Single-shard faceted inverted index.
//!
//! One writer mutates a working copy; [`Index::commit`] publishes it as an
//! immutable [`Snapshot`]. Readers grab the current snapshot with an `Arc`
//! clone and never block the writer. The working copy is shared with the last
//! snapshot until the next write, which clones it once (copy-on-write).
//!
//! Every mutation, commits included, consumes one sequence number. Replicas
//! receive entries with coordinator-assigned numbers through [`Index::apply`];
//! standalone use goes through [`Index::upsert`], [`Index::delete`] and
//! [`Index::commit`], which assign the next number locally.

mod persist;
mod query;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

pub use persist::{decode_frames, encode_frame, write_atomic, DecodedLog, LogEntry, SnapshotImage, WriteOp};
pub use query::{
    result_order, tokenize, FacetCounts, QueryError, QuerySpec, SearchResult, DEFAULT_LIMIT, MAX_RESULT_WINDOW,
};

use crate::model::{ContentDigest, MetadataRecord, RecordKey, RecordType};
use persist::{load_log, OpLogWriter};

const SNAPSHOT_FILE: &str = "snapshot.json";
const OPLOG_FILE: &str = "oplog.bin";
/// Entries kept in memory for `log_since`.
const RETAINED_ENTRIES: usize = 200_000;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("sequence gap: expected {expected}, got {got}")]
    SeqGap { expected: u64, got: u64 },
    #[error("corrupt op log at byte {offset}: {reason}")]
    CorruptLog { offset: u64, reason: String },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CommitPoint {
    pub seq: u64,
    pub doc_count: u64,
}

type Postings = HashSet<Arc<str>>;

#[derive(Debug, Clone, Default)]
struct Collection {
    docs: HashMap<Arc<str>, Arc<MetadataRecord>>,
    /// token -> ids whose field values contain it
    terms: HashMap<String, Postings>,
    /// field -> value -> ids carrying that exact value
    values: HashMap<String, HashMap<String, Postings>>,
}

impl Collection {
    fn insert(&mut self, record: MetadataRecord) {
        let id: Arc<str> = Arc::from(record.id.as_str());
        self.remove(&id);
        for (name, values) in &record.fields {
            for value in values {
                for token in tokenize(value) {
                    self.terms.entry(token).or_default().insert(id.clone());
                }
                self.values.entry(name.clone()).or_default().entry(value.clone()).or_default().insert(id.clone());
            }
        }
        self.docs.insert(id, Arc::new(record));
    }

    fn remove(&mut self, id: &str) -> bool {
        let Some(old) = self.docs.remove(id) else {
            return false;
        };
        for (name, values) in &old.fields {
            for value in values {
                for token in tokenize(value) {
                    if let Some(p) = self.terms.get_mut(&token) {
                        p.remove(id);
                        if p.is_empty() {
                            self.terms.remove(&token);
                        }
                    }
                }
                if let Some(by_value) = self.values.get_mut(name) {
                    if let Some(p) = by_value.get_mut(value) {
                        p.remove(id);
                        if p.is_empty() {
                            by_value.remove(value);
                        }
                    }
                    if by_value.is_empty() {
                        self.values.remove(name);
                    }
                }
            }
        }
        true
    }

    fn matching(&self, q: &QuerySpec) -> Vec<&Arc<MetadataRecord>> {
        let mut required: Vec<&Postings> = Vec::new();
        for token in q.tokens() {
            match self.terms.get(&token) {
                Some(p) => required.push(p),
                None => return Vec::new(),
            }
        }
        for (field, value) in &q.filters {
            match self.values.get(field).and_then(|by_value| by_value.get(value)) {
                Some(p) => required.push(p),
                None => return Vec::new(),
            }
        }

        let in_window = |r: &&Arc<MetadataRecord>| q.in_window(r.timestamp_ms);
        if required.is_empty() {
            return self.docs.values().filter(in_window).collect();
        }
        required.sort_by_key(|p| p.len());
        let (smallest, rest) = required.split_first().unwrap();
        smallest
            .iter()
            .filter(|id| rest.iter().all(|p| p.contains(*id)))
            .map(|id| &self.docs[id])
            .filter(in_window)
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
struct IndexData {
    collections: [Collection; 3],
}

fn slot(t: RecordType) -> usize {
    match t {
        RecordType::Dataset => 0,
        RecordType::File => 1,
        RecordType::Aggregation => 2,
    }
}

impl IndexData {
    fn collection(&self, t: RecordType) -> &Collection {
        &self.collections[slot(t)]
    }

    fn doc_count(&self) -> u64 {
        self.collections.iter().map(|c| c.docs.len() as u64).sum()
    }

    fn apply(&mut self, op: &WriteOp) {
        match op {
            WriteOp::Upsert { doc } => self.collections[slot(doc.record_type)].insert(doc.clone()),
            WriteOp::Delete { key } => {
                self.collections[slot(key.record_type)].remove(&key.id);
            }
            WriteOp::Commit => {}
        }
    }

    fn get(&self, key: &RecordKey) -> Option<&Arc<MetadataRecord>> {
        self.collection(key.record_type).docs.get(key.id.as_str())
    }

    /// All docs in key order.
    fn sorted_docs(&self) -> Vec<MetadataRecord> {
        let mut docs: Vec<MetadataRecord> =
            self.collections.iter().flat_map(|c| c.docs.values().map(|d| (**d).clone())).collect();
        docs.sort_by_key(MetadataRecord::key);
        docs
    }

    fn from_docs(docs: Vec<MetadataRecord>) -> Self {
        let mut data = IndexData::default();
        for doc in docs {
            data.collections[slot(doc.record_type)].insert(doc);
        }
        data
    }
}

/// Immutable committed view of an index.
#[derive(Debug, Clone)]
pub struct Snapshot {
    seq: u64,
    data: Arc<IndexData>,
}

impl Snapshot {
    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn doc_count(&self) -> u64 {
        self.data.doc_count()
    }

    pub fn count(&self, t: RecordType) -> u64 {
        self.data.collection(t).docs.len() as u64
    }

    pub fn get(&self, key: &RecordKey) -> Option<MetadataRecord> {
        self.data.get(key).map(|r| (**r).clone())
    }

    pub fn docs(&self) -> Vec<MetadataRecord> {
        self.data.sorted_docs()
    }

    /// `(key, digest)` of every doc, optionally only those from `source_node`, in key order.
    pub fn inventory(&self, source_node: Option<&str>) -> Vec<(RecordKey, ContentDigest)> {
        let mut items: Vec<(RecordKey, ContentDigest)> = self
            .data
            .collections
            .iter()
            .flat_map(|c| c.docs.values())
            .filter(|d| source_node.is_none_or(|s| d.source_node == s))
            .map(|d| (d.key(), d.digest()))
            .collect();
        items.sort();
        items
    }

    pub fn search(&self, q: &QuerySpec) -> Result<SearchResult, QueryError> {
        q.validate()?;
        let mut matches = self.data.collection(q.record_type).matching(q);
        matches.sort_unstable_by(|a, b| result_order(a, b));

        let mut facet_counts: FacetCounts = BTreeMap::new();
        for field in &q.facet_fields {
            let counts = facet_counts.entry(field.clone()).or_default();
            for doc in &matches {
                let distinct: BTreeSet<&String> = doc.field(field).iter().collect();
                for value in distinct {
                    *counts.entry(value.clone()).or_default() += 1;
                }
            }
        }

        let docs = matches.iter().skip(q.offset).take(q.limit).map(|d| MetadataRecord::clone(d)).collect();
        Ok(SearchResult { num_found: matches.len() as u64, docs, facet_counts })
    }
}

struct Writer {
    working: Arc<IndexData>,
    last_seq: u64,
    log: Option<OpLogWriter>,
    retained: VecDeque<LogEntry>,
}

impl Writer {
    fn record(&mut self, entry: LogEntry) -> Result<(), IndexError> {
        if let Some(log) = self.log.as_mut() {
            log.append(&entry)?;
            if entry.op == WriteOp::Commit {
                log.flush()?;
            }
        }
        if self.retained.len() == RETAINED_ENTRIES {
            self.retained.pop_front();
        }
        self.retained.push_back(entry);
        Ok(())
    }
}

/// A single-writer, many-reader faceted index, optionally persisted to a directory.
pub struct Index {
    writer: Mutex<Writer>,
    published: RwLock<Arc<Snapshot>>,
    dir: Option<PathBuf>,
}

impl Index {
    pub fn in_memory() -> Self {
        Self {
            writer: Mutex::new(Writer { working: Arc::default(), last_seq: 0, log: None, retained: VecDeque::new() }),
            published: RwLock::new(Arc::new(Snapshot { seq: 0, data: Arc::default() })),
            dir: None,
        }
    }

    /// Opens (or creates) a persisted index: loads the snapshot, then replays the op-log tail.
    pub fn open(dir: &Path) -> Result<Self, IndexError> {
        std::fs::create_dir_all(dir)?;
        let index = Self::in_memory();
        if let Some(image) = SnapshotImage::read(&dir.join(SNAPSHOT_FILE))? {
            index.load_image(image);
        }
        let tail = load_log(&dir.join(OPLOG_FILE))?;
        let mut replayed = 0;
        for entry in tail {
            if entry.seq <= index.last_seq() {
                continue;
            }
            index.apply(&entry)?;
            replayed += 1;
        }
        index.writer.lock().log = Some(OpLogWriter::open(&dir.join(OPLOG_FILE))?);
        tracing::debug!(dir = %dir.display(), seq = index.last_seq(), replayed, "index opened");
        Ok(Self { dir: Some(dir.to_path_buf()), ..index })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn upsert(&self, record: MetadataRecord) -> Result<u64, IndexError> {
        self.append(WriteOp::upsert(record))
    }

    /// Removes the key if present. An absent key still consumes a sequence number.
    pub fn delete(&self, record_type: RecordType, id: &str) -> Result<u64, IndexError> {
        self.append(WriteOp::delete(RecordKey::new(record_type, id)))
    }

    pub fn commit(&self) -> Result<CommitPoint, IndexError> {
        let seq = self.append(WriteOp::Commit)?;
        Ok(CommitPoint { seq, doc_count: self.published.read().doc_count() })
    }

    fn append(&self, op: WriteOp) -> Result<u64, IndexError> {
        let mut w = self.writer.lock();
        let seq = w.last_seq + 1;
        self.apply_locked(&mut w, LogEntry::new(seq, op))?;
        Ok(seq)
    }

    /// Applies an entry with an externally assigned sequence number.
    ///
    /// Entries at or below the current watermark are duplicates and ignored;
    /// anything beyond `watermark + 1` is a gap. Returns the new watermark.
    pub fn apply(&self, entry: &LogEntry) -> Result<u64, IndexError> {
        let mut w = self.writer.lock();
        if entry.seq <= w.last_seq {
            return Ok(w.last_seq);
        }
        if entry.seq != w.last_seq + 1 {
            return Err(IndexError::SeqGap { expected: w.last_seq + 1, got: entry.seq });
        }
        self.apply_locked(&mut w, entry.clone())?;
        Ok(w.last_seq)
    }

    fn apply_locked(&self, w: &mut Writer, entry: LogEntry) -> Result<(), IndexError> {
        w.record(entry.clone())?;
        Arc::make_mut(&mut w.working).apply(&entry.op);
        w.last_seq = entry.seq;
        if entry.op == WriteOp::Commit {
            *self.published.write() = Arc::new(Snapshot { seq: entry.seq, data: w.working.clone() });
        }
        Ok(())
    }

    /// Highest applied sequence number (the replica watermark).
    pub fn last_seq(&self) -> u64 {
        self.writer.lock().last_seq
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.published.read().clone()
    }

    pub fn commit_point(&self) -> CommitPoint {
        let s = self.snapshot();
        CommitPoint { seq: s.seq, doc_count: s.doc_count() }
    }

    pub fn search(&self, q: &QuerySpec) -> Result<SearchResult, QueryError> {
        self.snapshot().search(q)
    }

    /// Up to `limit` retained entries with `seq >= from_seq`.
    pub fn log_since(&self, from_seq: u64, limit: usize) -> Vec<LogEntry> {
        let w = self.writer.lock();
        let start = w.retained.partition_point(|e| e.seq < from_seq);
        w.retained.range(start..).take(limit).cloned().collect()
    }

    /// Full applied state (including uncommitted ops) at the current watermark.
    pub fn export(&self) -> SnapshotImage {
        let w = self.writer.lock();
        SnapshotImage { seq: w.last_seq, docs: w.working.sorted_docs() }
    }

    fn load_image(&self, image: SnapshotImage) {
        let mut w = self.writer.lock();
        w.working = Arc::new(IndexData::from_docs(image.docs));
        w.last_seq = image.seq;
        w.retained.clear();
        *self.published.write() = Arc::new(Snapshot { seq: image.seq, data: w.working.clone() });
    }

    /// Replaces all state with `image` (snapshot bootstrap) and publishes it.
    pub fn install(&self, image: SnapshotImage) -> Result<(), IndexError> {
        self.load_image(image);
        self.checkpoint()
    }

    /// Persists the working state as the snapshot file and empties the op log.
    ///
    /// The working state is published first, so the snapshot is also what
    /// readers see. No-op for in-memory indexes.
    pub fn checkpoint(&self) -> Result<(), IndexError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let mut w = self.writer.lock();
        let image = SnapshotImage { seq: w.last_seq, docs: w.working.sorted_docs() };
        *self.published.write() = Arc::new(Snapshot { seq: w.last_seq, data: w.working.clone() });
        image.write_atomic(&dir.join(SNAPSHOT_FILE))?;
        if let Some(log) = w.log.as_mut() {
            log.reset()?;
        }
        Ok(())
    }
}

impl Default for Index {
    fn default() -> Self {
        Self::in_memory()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn rec(t: RecordType, id: &str, ts: i64, fields: serde_json::Value) -> MetadataRecord {
        let mut doc = json!({"type": t.as_str(), "id": id, "source_node": "n1", "timestamp_ms": ts});
        doc["fields"] = fields;
        MetadataRecord::from_document(&doc).unwrap()
    }

    fn ds(id: &str, ts: i64, project: &str) -> MetadataRecord {
        rec(RecordType::Dataset, id, ts, json!({"project": [project], "title": [format!("{project} tas monthly")]}))
    }

    #[test]
    fn empty_index_match_all() {
        let index = Index::in_memory();
        let r = index.search(&QuerySpec { facet_fields: vec!["project".into()], ..QuerySpec::default() }).unwrap();
        assert_eq!(r.num_found, 0);
        assert!(r.docs.is_empty());
        assert_eq!(r.facet_counts["project"], BTreeMap::new());
    }

    #[test]
    fn upsert_visible_after_commit() {
        let index = Index::in_memory();
        index.upsert(ds("d1", 5, "CMIP6")).unwrap();
        assert_eq!(index.search(&QuerySpec::default()).unwrap().num_found, 0);
        index.commit().unwrap();
        assert_eq!(index.search(&QuerySpec::default()).unwrap().num_found, 1);
    }

    #[test]
    fn upsert_replaces_prior_version() {
        let index = Index::in_memory();
        index.upsert(ds("d1", 5, "CMIP5")).unwrap();
        let mut v1 = ds("d1", 6, "CMIP6");
        v1.version = 1;
        index.upsert(v1).unwrap();
        index.commit().unwrap();
        let r = index.search(&QuerySpec::default()).unwrap();
        assert_eq!(r.num_found, 1);
        assert_eq!(r.docs[0].version, 1);
        // Old terms are gone.
        let q = QuerySpec { query_text: "cmip5".into(), ..QuerySpec::default() };
        assert_eq!(index.search(&q).unwrap().num_found, 0);
    }

    #[test]
    fn delete_and_absent_delete() {
        let index = Index::in_memory();
        index.upsert(ds("d1", 5, "CMIP6")).unwrap();
        index.upsert(ds("d2", 6, "CMIP6")).unwrap();
        index.commit().unwrap();
        let before = index.last_seq();
        let seq = index.delete(RecordType::Dataset, "d1").unwrap();
        assert_eq!(seq, before + 1);
        index.commit().unwrap();
        assert_eq!(index.search(&QuerySpec::default()).unwrap().num_found, 1);
        let seq = index.delete(RecordType::Dataset, "nope").unwrap();
        assert_eq!(seq, before + 3);
        index.commit().unwrap();
        assert_eq!(index.search(&QuerySpec::default()).unwrap().doc_ids(), ["d2"]);
    }

    #[test]
    fn commit_semantics() {
        let index = Index::in_memory();
        let c1 = index.commit().unwrap();
        let c2 = index.commit().unwrap();
        assert!(c2.seq > c1.seq);
        assert_eq!(c2.doc_count, 0);
        index.upsert(ds("d1", 5, "CMIP6")).unwrap();
        let c3 = index.commit().unwrap();
        assert_eq!(c3.doc_count, 1);
        let c4 = index.commit().unwrap();
        assert!(c4.seq > c3.seq);
        assert_eq!(c4.doc_count, 1);
    }

    #[test]
    fn snapshot_isolation() {
        let index = Index::in_memory();
        index.upsert(ds("d1", 5, "CMIP6")).unwrap();
        index.commit().unwrap();
        let snap = index.snapshot();
        index.upsert(ds("d2", 6, "CMIP6")).unwrap();
        index.delete(RecordType::Dataset, "d1").unwrap();
        index.commit().unwrap();
        assert_eq!(snap.search(&QuerySpec::default()).unwrap().doc_ids(), ["d1"]);
        assert_eq!(index.search(&QuerySpec::default()).unwrap().doc_ids(), ["d2"]);
    }

    #[test]
    fn facet_counts_over_three_docs() {
        let index = Index::in_memory();
        index.upsert(ds("a", 1, "CMIP6")).unwrap();
        index.upsert(ds("b", 2, "CMIP6")).unwrap();
        index.upsert(ds("c", 3, "CMIP5")).unwrap();
        index.commit().unwrap();
        let q = QuerySpec { facet_fields: vec!["project".into()], limit: 1, ..QuerySpec::default() };
        let r = index.search(&q).unwrap();
        // Brute-force tally of the three docs: CMIP6 twice, CMIP5 once.
        let expected: BTreeMap<String, u64> = [("CMIP5".to_string(), 1), ("CMIP6".to_string(), 2)].into();
        assert_eq!(r.facet_counts["project"], expected);
        assert_eq!(r.num_found, 3);
        assert_eq!(r.doc_ids(), ["c"]);
    }

    #[test]
    fn multi_valued_field_counts_once_per_doc() {
        let index = Index::in_memory();
        index.upsert(rec(RecordType::File, "f1", 1, json!({"variable": ["tas", "tas", "pr"]}))).unwrap();
        index.commit().unwrap();
        let q = QuerySpec {
            record_type: RecordType::File,
            facet_fields: vec!["variable".into(), "missing".into()],
            ..QuerySpec::default()
        };
        let r = index.search(&q).unwrap();
        assert_eq!(r.facet_counts["variable"]["tas"], 1);
        assert_eq!(r.facet_counts["variable"]["pr"], 1);
        assert!(r.facet_counts["missing"].is_empty());
    }

    #[test]
    fn ordering_filters_text_and_window() {
        let index = Index::in_memory();
        index.upsert(ds("b", 10, "CMIP6")).unwrap();
        index.upsert(ds("a", 10, "CMIP6")).unwrap();
        index.upsert(ds("c", 20, "CMIP5")).unwrap();
        index.upsert(rec(RecordType::File, "f", 30, json!({"project": ["CMIP6"]}))).unwrap();
        index.commit().unwrap();
        assert_eq!(index.search(&QuerySpec::default()).unwrap().doc_ids(), ["c", "a", "b"]);
        let q = QuerySpec { filters: vec![("project".into(), "CMIP6".into())], ..QuerySpec::default() };
        assert_eq!(index.search(&q).unwrap().doc_ids(), ["a", "b"]);
        let q = QuerySpec { filters: vec![("project".into(), "cmip6".into())], ..QuerySpec::default() };
        assert_eq!(index.search(&q).unwrap().num_found, 0);
        let q = QuerySpec { filters: vec![("nosuch".into(), "x".into())], ..QuerySpec::default() };
        assert_eq!(index.search(&q).unwrap().num_found, 0);
        let q = QuerySpec { query_text: "TAS Monthly".into(), ..QuerySpec::default() };
        assert_eq!(index.search(&q).unwrap().num_found, 3);
        let q = QuerySpec { query_text: "cmip5 tas".into(), ..QuerySpec::default() };
        assert_eq!(index.search(&q).unwrap().doc_ids(), ["c"]);
        let q = QuerySpec { from_ms: Some(10), to_ms: Some(20), ..QuerySpec::default() };
        assert_eq!(index.search(&q).unwrap().doc_ids(), ["a", "b"]);
        let q = QuerySpec { offset: 1, limit: 1, ..QuerySpec::default() };
        let r = index.search(&q).unwrap();
        assert_eq!((r.num_found, r.doc_ids()), (3, vec!["a"]));
        let q = QuerySpec { limit: 0, ..QuerySpec::default() };
        let r = index.search(&q).unwrap();
        assert_eq!((r.num_found, r.docs.len()), (3, 0));
    }

    #[test]
    fn apply_enforces_contiguous_sequence() {
        let index = Index::in_memory();
        index.apply(&LogEntry::new(1, WriteOp::upsert(ds("d1", 5, "CMIP6")))).unwrap();
        // Duplicate delivery is ignored.
        assert_eq!(index.apply(&LogEntry::new(1, WriteOp::Commit)).unwrap(), 1);
        assert!(matches!(
            index.apply(&LogEntry::new(3, WriteOp::Commit)),
            Err(IndexError::SeqGap { expected: 2, got: 3 })
        ));
        index.apply(&LogEntry::new(2, WriteOp::Commit)).unwrap();
        assert_eq!(index.commit_point(), CommitPoint { seq: 2, doc_count: 1 });
        assert_eq!(index.log_since(2, 10), vec![LogEntry::new(2, WriteOp::Commit)]);
        assert_eq!(index.log_since(1, 10).len(), 2);
    }

    #[test]
    fn persistence_replays_log_tail() {
        let dir = tempfile::tempdir().unwrap();
        {
            let index = Index::open(dir.path()).unwrap();
            index.upsert(ds("d1", 5, "CMIP6")).unwrap();
            index.commit().unwrap();
            index.checkpoint().unwrap();
            index.upsert(ds("d2", 6, "CMIP6")).unwrap();
            index.delete(RecordType::Dataset, "d1").unwrap();
            index.commit().unwrap();
            index.upsert(ds("d3", 7, "CMIP6")).unwrap();
        }
        let index = Index::open(dir.path()).unwrap();
        assert_eq!(index.last_seq(), 6);
        // d3 was never committed.
        assert_eq!(index.search(&QuerySpec::default()).unwrap().doc_ids(), ["d2"]);
        index.commit().unwrap();
        assert_eq!(index.search(&QuerySpec::default()).unwrap().doc_ids(), ["d3", "d2"]);
    }

    #[test]
    fn install_replaces_state() {
        let source = Index::in_memory();
        source.upsert(ds("d1", 5, "CMIP6")).unwrap();
        source.upsert(ds("d2", 6, "CMIP5")).unwrap();
        let image = source.export();
        let target = Index::in_memory();
        target.upsert(ds("zz", 1, "CMIP5")).unwrap();
        target.install(image.clone()).unwrap();
        assert_eq!(target.last_seq(), 2);
        assert_eq!(target.export(), image);
        assert_eq!(target.snapshot().doc_count(), 2);
    }
}
