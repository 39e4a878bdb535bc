//! Scenario files and the end-to-end convergence run.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::corpus::generate_corpus;
use super::node::{SimNode, SimSource};
use super::script::{MutationScript, ScriptError, ScriptParams};
use crate::cluster::{Cluster, ClusterError, DEFAULT_NUM_SHARDS, DEFAULT_REPLICATION_FACTOR};
use crate::harvest::{
    HarvestError, Harvester, Scheduler, SourceNodeConfig, TaskStatus, DEFAULT_PAGE_SIZE, DEFAULT_POLL_INTERVAL_MS,
    DEFAULT_RECONCILE_EVERY, DEFAULT_SKEW_EPSILON_MS,
};
use crate::model::{ContentDigest, RecordKey};

fn default_shards() -> usize {
    DEFAULT_NUM_SHARDS
}
fn default_replication() -> usize {
    DEFAULT_REPLICATION_FACTOR
}
fn default_interval() -> u64 {
    DEFAULT_POLL_INTERVAL_MS
}
fn default_skew() -> i64 {
    DEFAULT_SKEW_EPSILON_MS
}
fn default_page_size() -> usize {
    DEFAULT_PAGE_SIZE
}
fn default_reconcile_every() -> u64 {
    DEFAULT_RECONCILE_EVERY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub source_id: String,
    #[serde(default)]
    pub initial_n: usize,
    /// Explicit timeline. Ignored when `random_script` is set.
    #[serde(default, skip_serializing_if = "MutationScript::is_empty")]
    pub script: MutationScript,
    /// Generate the timeline from the scenario seed instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_script: Option<ScriptParams>,
}

/// A federation to simulate plus the topology and cadence to harvest it with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub nodes: Vec<NodeSpec>,
    #[serde(default = "default_shards")]
    pub num_shards: usize,
    #[serde(default = "default_replication")]
    pub replication_factor: usize,
    #[serde(default = "default_interval")]
    pub sync_interval_ms: u64,
    #[serde(default = "default_skew")]
    pub skew_epsilon_ms: i64,
    #[serde(default = "default_page_size")]
    pub page_size: usize,
    #[serde(default = "default_reconcile_every")]
    pub reconcile_every: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("source {source_id}: {error}")]
    Script { source_id: String, error: ScriptError },
    #[error(transparent)]
    Harvest(#[from] HarvestError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Simulated time the run stopped at.
    pub final_ms: i64,
    pub intervals: u64,
    pub sources: Vec<TaskStatus>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Self = serde_json::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut seen = std::collections::HashSet::new();
        for node in &self.nodes {
            self.source_config(node).validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            if !seen.insert(node.source_id.as_str()) {
                return Err(ScenarioError::Invalid(format!("duplicate source_id {}", node.source_id)));
            }
            node.script
                .validate()
                .map_err(|error| ScenarioError::Script { source_id: node.source_id.clone(), error })?;
        }
        if self.num_shards == 0 || self.replication_factor == 0 {
            return Err(ScenarioError::Invalid("num_shards and replication_factor must be at least 1".into()));
        }
        if self.reconcile_every == 0 {
            return Err(ScenarioError::Invalid("reconcile_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn source_config(&self, node: &NodeSpec) -> SourceNodeConfig {
        SourceNodeConfig {
            page_size: self.page_size,
            poll_interval_ms: self.sync_interval_ms,
            skew_epsilon_ms: self.skew_epsilon_ms,
            ..SourceNodeConfig::new(node.source_id.clone(), format!("sim://{}", node.source_id))
        }
    }

    /// The timeline a node will play, generated when the node sets `random_script`.
    pub fn script_for(&self, node: &NodeSpec) -> MutationScript {
        match node.random_script {
            Some(params) => {
                let initial = generate_corpus(self.seed, node.initial_n, &node.source_id);
                MutationScript::random(self.seed, &node.source_id, &initial, params)
            }
            None => node.script.clone(),
        }
    }

    /// Fresh simulated nodes in their initial state.
    pub fn build_sources(&self) -> Vec<SimSource> {
        self.nodes
            .iter()
            .map(|spec| {
                let corpus = generate_corpus(self.seed, spec.initial_n, &spec.source_id);
                SimSource::new(SimNode::new(spec.source_id.clone(), corpus).with_script(self.script_for(spec)))
            })
            .collect()
    }

    /// Harvests the federation while the scripts play out.
    ///
    /// Every source is fully harvested at the start, then synced every
    /// `sync_interval_ms` of simulated time (reconciling every
    /// `reconcile_every` syncs) until the last step has run. The run finishes
    /// with one incremental sync and one reconcile per source. Errors inside
    /// the timed phase are retried on the next interval; the final pass must
    /// succeed.
    pub fn run(&self, harvester: Arc<Harvester>, sources: &[SimSource]) -> Result<RunSummary, ScenarioError> {
        let start_ms = sources.iter().map(|s| s.node().read().sim_clock_ms).max().unwrap_or(0);
        let end_ms = sources
            .iter()
            .filter_map(|s| s.node().read().script().last_at_ms())
            .max()
            .unwrap_or(start_ms)
            .max(start_ms);

        let mut scheduler = Scheduler::new(harvester.clone(), self.reconcile_every);
        for (spec, source) in self.nodes.iter().zip(sources) {
            scheduler.add_source(self.source_config(spec), Arc::new(source.clone()), start_ms);
        }
        let advance = |to_ms: i64| -> Result<(), ScenarioError> {
            for source in sources {
                source
                    .advance(to_ms)
                    .map_err(|error| ScenarioError::Script { source_id: source.source_id(), error })?;
            }
            Ok(())
        };

        scheduler.run_due(start_ms);
        let step = self.sync_interval_ms.max(1) as i64;
        let mut now = start_ms;
        let mut intervals = 0;
        while now < end_ms {
            now += step;
            intervals += 1;
            advance(now)?;
            scheduler.run_due(now);
        }

        for (spec, source) in self.nodes.iter().zip(sources) {
            let cfg = self.source_config(spec);
            if harvester.cursors().get(&cfg.source_id).is_none() {
                harvester.full_harvest(&cfg, source)?;
            }
            harvester.incremental_sync(&cfg, source)?;
            harvester.reconcile(&cfg, source)?;
        }
        Ok(RunSummary { final_ms: now, intervals, sources: scheduler.statuses() })
    }
}

/// Difference between the super-index and the union of source stores.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub expected: u64,
    pub indexed: u64,
    pub missing: Vec<RecordKey>,
    pub unexpected: Vec<RecordKey>,
    /// Present on both sides with different digests. The digest covers
    /// version and source attribution as well as content.
    pub mismatched: Vec<RecordKey>,
    /// `(shard, slot)` of replicas whose state differs from slot 0 of the shard.
    pub divergent_replicas: Vec<(usize, usize)>,
}

impl ConvergenceReport {
    pub fn converged(&self) -> bool {
        self.missing.is_empty()
            && self.unexpected.is_empty()
            && self.mismatched.is_empty()
            && self.divergent_replicas.is_empty()
    }
}

/// Compares the committed cluster contents with the sources' current stores
/// and checks that every replica of a shard holds byte-identical state.
pub fn verify_convergence(cluster: &Cluster, sources: &[SimSource]) -> Result<ConvergenceReport, ClusterError> {
    let mut expected: BTreeMap<RecordKey, ContentDigest> = BTreeMap::new();
    for source in sources {
        let node = source.node().read();
        expected.extend(node.store.iter().map(|(k, r)| (k.clone(), r.digest())));
    }
    let indexed: BTreeMap<RecordKey, ContentDigest> =
        cluster.inventory(None)?.into_iter().map(|i| (i.key, i.digest)).collect();

    let mut report = ConvergenceReport {
        expected: expected.len() as u64,
        indexed: indexed.len() as u64,
        ..ConvergenceReport::default()
    };
    for (key, digest) in &expected {
        match indexed.get(key) {
            None => report.missing.push(key.clone()),
            Some(d) if d != digest => report.mismatched.push(key.clone()),
            Some(_) => {}
        }
    }
    report.unexpected = indexed.keys().filter(|k| !expected.contains_key(*k)).cloned().collect();

    for shard in 0..cluster.num_shards() {
        let images: Vec<Option<Vec<u8>>> =
            cluster.replica_images(shard).into_iter().map(|r| r.ok().map(|img| img.to_bytes())).collect();
        for (slot, image) in images.iter().enumerate().skip(1) {
            if image.is_none() || *image != images[0] {
                report.divergent_replicas.push((shard, slot));
            }
        }
        if images[0].is_none() {
            report.divergent_replicas.push((shard, 0));
        }
    }
    Ok(report)
}
