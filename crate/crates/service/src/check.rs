//! End-to-end convergence check for a scenario file.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use superindex_core::cluster::open_local_grid;
use superindex_core::harvest::CursorStore;
use superindex_core::sim::{verify_convergence, ConvergenceReport, RunSummary, Scenario, ScenarioError, SimSource};
use superindex_core::{Cluster, ClusterError, Harvester, IndexError};

/// Written into the data directory once a build has finished.
const MARKER: &str = "check-complete.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckOutcome {
    /// Whether this invocation harvested the federation or only verified an existing build.
    pub built: bool,
    pub summary: Option<RunSummary>,
    pub report: ConvergenceReport,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("opening replicas: {0}")]
    Index(#[from] IndexError),
    #[error("data directory: {0}")]
    Io(#[from] std::io::Error),
}

/// Sources in the state they reach once their scripts have fully played.
fn final_sources(scenario: &Scenario) -> Result<Vec<SimSource>, ScenarioError> {
    let sources = scenario.build_sources();
    for s in &sources {
        s.advance(i64::MAX).map_err(|error| ScenarioError::Script { source_id: s.source_id(), error })?;
    }
    Ok(sources)
}

/// Harvests the scenario into a cluster (unless `data_dir` already holds a
/// finished build) and compares the result with the union of the sources.
pub fn run_check(scenario: &Scenario, data_dir: Option<&Path>) -> Result<CheckOutcome, CheckError> {
    let (shards, rf) = (scenario.num_shards, scenario.replication_factor);
    let Some(dir) = data_dir else {
        let cluster = Arc::new(Cluster::in_memory(shards, rf)?);
        let harvester = Arc::new(Harvester::new(cluster.clone(), CursorStore::in_memory()));
        let sources = scenario.build_sources();
        let summary = scenario.run(harvester, &sources)?;
        let report = verify_convergence(&cluster, &sources)?;
        return Ok(CheckOutcome { built: true, summary: Some(summary), report });
    };

    let grid = open_local_grid(dir, shards, rf)?;
    let cluster = Arc::new(Cluster::from_local(&grid)?);
    let marker = dir.join(MARKER);
    if marker.exists() {
        let report = verify_convergence(&cluster, &final_sources(scenario)?)?;
        return Ok(CheckOutcome { built: false, summary: None, report });
    }
    let harvester = Arc::new(Harvester::new(cluster.clone(), CursorStore::open(&dir.join("cursors"))?));
    let sources = scenario.build_sources();
    let summary = scenario.run(harvester, &sources)?;
    cluster.checkpoint()?;
    superindex_core::index::write_atomic(&marker, &serde_json::to_vec(&summary).expect("plain JSON"))?;
    let report = verify_convergence(&cluster, &sources)?;
    Ok(CheckOutcome { built: true, summary: Some(summary), report })
}
