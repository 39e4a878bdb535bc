//! Test support: a linear-scan search oracle, seeded query generation, and
//! replica servers that can be crashed and restarted from disk.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::Rng;
use superindex::replica::{http_agent, replica_router};
use superindex::{spawn_server, HttpReplica, ServerHandle};
use superindex_core::cluster::{LocalReplica, Replica};
use superindex_core::index::{FacetCounts, WriteOp};
use superindex_core::model::format_timestamp;
use superindex_core::sim::{generate_corpus, EXPERIMENTS, FREQUENCIES, INSTITUTES, PROJECTS, VARIABLES};
use superindex_core::{Cluster, MetadataRecord, QuerySpec, RecordType, SearchResult};
use tokio::runtime::Runtime;

pub const FACET_FIELDS: [&str; 5] = ["project", "variable", "institute", "experiment", "frequency"];

fn words(value: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in value.chars() {
        if c.is_whitespace() || "/.,:;=".contains(c) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else {
            cur.extend(c.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn matches(doc: &MetadataRecord, q: &QuerySpec) -> bool {
    if doc.record_type != q.record_type {
        return false;
    }
    if q.from_ms.is_some_and(|f| doc.timestamp_ms < f) || q.to_ms.is_some_and(|t| doc.timestamp_ms >= t) {
        return false;
    }
    let doc_words: BTreeSet<String> = doc.fields.values().flatten().flat_map(|v| words(v)).collect();
    if !words(&q.query_text).iter().all(|w| doc_words.contains(w)) {
        return false;
    }
    q.filters.iter().all(|(f, v)| doc.fields.get(f).is_some_and(|vals| vals.contains(v)))
}

/// Brute-force search over a flat list of records.
pub fn oracle_search(docs: &[MetadataRecord], q: &QuerySpec) -> SearchResult {
    let mut hits: Vec<&MetadataRecord> = docs.iter().filter(|d| matches(d, q)).collect();
    hits.sort_by(|a, b| b.timestamp_ms.cmp(&a.timestamp_ms).then(a.id.cmp(&b.id)));
    let mut facet_counts = FacetCounts::new();
    for field in &q.facet_fields {
        let counts: &mut BTreeMap<String, u64> = facet_counts.entry(field.clone()).or_default();
        for d in &hits {
            let distinct: BTreeSet<&String> = d.fields.get(field).into_iter().flatten().collect();
            for v in distinct {
                *counts.entry(v.clone()).or_default() += 1;
            }
        }
    }
    SearchResult {
        num_found: hits.len() as u64,
        docs: hits.into_iter().skip(q.offset).take(q.limit).cloned().collect(),
        facet_counts,
    }
}

/// A random query over the simulator vocabulary.
pub fn random_query(rng: &mut impl Rng, time_range: (i64, i64)) -> QuerySpec {
    let record_type = *RecordType::ALL.choose(rng).unwrap();
    let mut q = QuerySpec { record_type, ..QuerySpec::default() };
    match rng.random_range(0..6) {
        0 => {}
        1 => q.query_text = VARIABLES.choose(rng).unwrap().to_string(),
        2 => q.query_text = format!("{} {}", INSTITUTES.choose(rng).unwrap(), EXPERIMENTS.choose(rng).unwrap()),
        3 => q.query_text = PROJECTS.choose(rng).unwrap().to_uppercase(),
        4 => q.query_text = "nosuchterm".into(),
        _ => q.query_text = FREQUENCIES.choose(rng).unwrap().to_string(),
    }
    if rng.random_bool(0.4) {
        q.filters.push(("project".into(), PROJECTS.choose(rng).unwrap().to_string()));
    }
    if rng.random_bool(0.2) {
        q.filters.push(("institute".into(), INSTITUTES.choose(rng).unwrap().to_string()));
    }
    for f in FACET_FIELDS {
        if rng.random_bool(0.4) {
            q.facet_fields.push(f.to_string());
        }
    }
    if rng.random_bool(0.25) {
        let (lo, hi) = time_range;
        let a = rng.random_range(lo..=hi);
        let b = rng.random_range(lo..=hi);
        q.from_ms = Some(a.min(b));
        q.to_ms = Some(a.max(b));
    }
    q.offset = if rng.random_bool(0.3) { rng.random_range(0..60) } else { 0 };
    q.limit = rng.random_range(0..40);
    q
}

/// Totals, id order and facets: what "same answer" means for a search.
pub fn shape(r: &SearchResult) -> (u64, Vec<String>, FacetCounts) {
    (r.num_found, r.docs.iter().map(|d| d.id.clone()).collect(), r.facet_counts.clone())
}

/// `n` records split across three source nodes.
pub fn corpus(seed: u64, n: usize) -> Vec<MetadataRecord> {
    let mut docs = generate_corpus(seed, n / 3, "llnl");
    docs.extend(generate_corpus(seed, n / 3, "ceda"));
    docs.extend(generate_corpus(seed, n - 2 * (n / 3), "nci"));
    docs
}

pub fn ingest(cluster: &Cluster, docs: &[MetadataRecord], batch: usize) {
    for chunk in docs.chunks(batch) {
        cluster.apply_batch(chunk.iter().cloned().map(WriteOp::upsert).collect()).unwrap();
        cluster.commit().unwrap();
    }
}

/// The `/search` query string for `q`.
pub fn query_params(q: &QuerySpec) -> Vec<(String, String)> {
    let mut p = vec![("type".to_string(), q.record_type.as_str().to_string())];
    if !q.query_text.is_empty() {
        p.push(("q".into(), q.query_text.clone()));
    }
    p.extend(q.filters.iter().cloned());
    if !q.facet_fields.is_empty() {
        p.push(("facets".into(), q.facet_fields.join(",")));
    }
    if let Some(f) = q.from_ms {
        p.push(("from".into(), format_timestamp(f)));
    }
    if let Some(t) = q.to_ms {
        p.push(("to".into(), format_timestamp(t)));
    }
    p.push(("offset".into(), q.offset.to_string()));
    p.push(("limit".into(), q.limit.to_string()));
    p
}

/// GET `url` with `params`; returns status and body bytes.
pub fn get(url: &str, params: &[(String, String)]) -> (u16, Vec<u8>) {
    let mut req = http_agent(Duration::from_secs(60)).get(url);
    for (k, v) in params {
        req = req.query(k, v);
    }
    let mut resp = req.call().expect("server reachable");
    let status = resp.status().as_u16();
    (status, resp.body_mut().with_config().limit(u64::MAX).read_to_vec().unwrap())
}

pub fn post_json(url: &str, body: &serde_json::Value) -> (u16, Vec<u8>) {
    let mut resp = http_agent(Duration::from_secs(600)).post(url).send_json(body).expect("server reachable");
    let status = resp.status().as_u16();
    (status, resp.body_mut().read_to_vec().unwrap())
}

pub fn runtime() -> Runtime {
    tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap()
}

/// A replica server with its own runtime, standing in for a separate process.
/// `kill` tears the runtime down, closing the listener and every connection.
pub struct ReplicaProcess {
    pub addr: SocketAddr,
    dir: PathBuf,
    rt: Option<Runtime>,
    server: Option<ServerHandle>,
}

impl ReplicaProcess {
    pub fn start(dir: &Path) -> Self {
        let mut p = Self { addr: "127.0.0.1:0".parse().unwrap(), dir: dir.to_path_buf(), rt: None, server: None };
        p.restart();
        p
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn is_running(&self) -> bool {
        self.rt.is_some()
    }

    /// Reopens the replica from its directory and listens on the same address.
    pub fn restart(&mut self) {
        assert!(self.rt.is_none(), "already running");
        let rt = runtime();
        let local = Arc::new(LocalReplica::open(format!("http://{}", self.addr), &self.dir).unwrap());
        let server = spawn_server(rt.handle(), &self.addr.to_string(), replica_router(local)).unwrap();
        self.addr = server.addr;
        self.server = Some(server);
        self.rt = Some(rt);
    }

    pub fn kill(&mut self) {
        self.server = None;
        if let Some(rt) = self.rt.take() {
            rt.shutdown_timeout(Duration::from_secs(10));
        }
    }
}

impl Drop for ReplicaProcess {
    fn drop(&mut self) {
        self.kill();
    }
}

/// A grid of replica servers under one temporary directory.
pub struct HttpGrid {
    pub procs: Vec<Vec<ReplicaProcess>>,
    _dir: tempfile::TempDir,
}

impl HttpGrid {
    pub fn start(num_shards: usize, rf: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let procs = (0..num_shards)
            .map(|s| (0..rf).map(|r| ReplicaProcess::start(&dir.path().join(format!("s{s}r{r}")))).collect())
            .collect();
        Self { procs, _dir: dir }
    }

    /// A coordinator-side cluster talking to these servers.
    pub fn cluster(&self) -> Cluster {
        let grid: Vec<Vec<Arc<dyn Replica>>> = self
            .procs
            .iter()
            .map(|row| row.iter().map(|p| Arc::new(HttpReplica::new(p.url())) as Arc<dyn Replica>).collect())
            .collect();
        Cluster::new(grid).unwrap()
    }
}
