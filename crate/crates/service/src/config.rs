//! The service configuration file and its startup checks.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use superindex_core::harvest::{SourceConfigError, DEFAULT_RECONCILE_EVERY};
use superindex_core::SourceNodeConfig;

pub const CONFIG_ENV: &str = "SUPERINDEX_CONFIG";

/// Replica endpoint meaning "run this replica inside the coordinator process".
pub const LOCAL_ENDPOINT: &str = "local";

fn default_reconcile_every() -> u64 {
    DEFAULT_RECONCILE_EVERY
}
fn default_health_interval() -> u64 {
    5_000
}
fn default_bind() -> String {
    "127.0.0.1".into()
}
fn default_port() -> u16 {
    8080
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub num_shards: usize,
    pub replication_factor: usize,
    /// Shard-major: entry `s * replication_factor + r` is replica `r` of shard `s`.
    pub replicas: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_port")]
    pub port: u16,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self { bind: default_bind(), port: default_port() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub sources: Vec<SourceNodeConfig>,
    #[serde(default)]
    pub http: HttpConfig,
    pub data_dir: PathBuf,
    #[serde(default = "default_reconcile_every")]
    pub reconcile_every_n_cycles: u64,
    #[serde(default = "default_health_interval")]
    pub health_check_interval_ms: u64,
}

/// Every way a configuration can be rejected. [`ConfigError::code`] is stable.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("no configuration given: pass --config or set {CONFIG_ENV}")]
    Missing,
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("malformed configuration: {0}")]
    Malformed(String),
    #[error("num_shards must be at least 1")]
    BadNumShards,
    #[error("replication_factor must be at least 1")]
    BadReplicationFactor,
    #[error("expected {expected} replica endpoints (num_shards x replication_factor), got {got}")]
    EndpointCountMismatch { expected: usize, got: usize },
    #[error("replica endpoint {0:?} is neither \"local\" nor http://host:port")]
    BadEndpoint(String),
    #[error("replica endpoint {0} is listed twice")]
    DuplicateEndpoint(String),
    #[error("{0}")]
    Source(#[from] SourceConfigError),
    #[error("source {0} is configured twice")]
    DuplicateSource(String),
    #[error("reconcile_every_n_cycles must be at least 1")]
    BadReconcileCadence,
    #[error("health_check_interval_ms must be at least 1")]
    BadHealthInterval,
    #[error("data_dir {path} is not writable: {reason}")]
    DataDirNotWritable { path: PathBuf, reason: String },
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::Missing => "config_missing",
            ConfigError::Unreadable { .. } => "config_unreadable",
            ConfigError::Malformed(_) => "config_malformed",
            ConfigError::BadNumShards => "bad_num_shards",
            ConfigError::BadReplicationFactor => "bad_replication_factor",
            ConfigError::EndpointCountMismatch { .. } => "endpoint_count_mismatch",
            ConfigError::BadEndpoint(_) => "bad_endpoint",
            ConfigError::DuplicateEndpoint(_) => "duplicate_endpoint",
            ConfigError::Source(SourceConfigError::BadSourceId(_)) => "bad_source_id",
            ConfigError::Source(SourceConfigError::BadPageSize(_)) => "bad_page_size",
            ConfigError::Source(SourceConfigError::BadSkew(_)) => "bad_skew",
            ConfigError::Source(SourceConfigError::BadPollInterval(_)) => "bad_poll_interval",
            ConfigError::DuplicateSource(_) => "duplicate_source",
            ConfigError::BadReconcileCadence => "bad_reconcile_cadence",
            ConfigError::BadHealthInterval => "bad_health_interval",
            ConfigError::DataDirNotWritable { .. } => "data_dir_not_writable",
        }
    }
}

/// `host:port` of an `http://host:port` endpoint.
pub fn http_authority(endpoint: &str) -> Option<&str> {
    let rest = endpoint.strip_prefix("http://")?;
    let authority = rest.trim_end_matches('/');
    let (host, port) = authority.rsplit_once(':')?;
    let valid = !host.is_empty() && !authority.contains('/') && port.parse::<u16>().is_ok_and(|p| p > 0);
    valid.then_some(authority)
}

impl ServiceConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Malformed(e.to_string()))
    }

    /// Reads the file named by `SUPERINDEX_CONFIG`, falling back to `flag`.
    pub fn locate(flag: Option<&Path>) -> Result<PathBuf, ConfigError> {
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Ok(PathBuf::from(p)),
            _ => flag.map(Path::to_path_buf).ok_or(ConfigError::Missing),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Unreadable { path: path.to_path_buf(), reason: e.to_string() })?;
        Self::from_json(&text)
    }

    /// Static checks that need no filesystem access.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.cluster;
        if c.num_shards == 0 {
            return Err(ConfigError::BadNumShards);
        }
        if c.replication_factor == 0 {
            return Err(ConfigError::BadReplicationFactor);
        }
        let expected = c.num_shards * c.replication_factor;
        if c.replicas.len() != expected {
            return Err(ConfigError::EndpointCountMismatch { expected, got: c.replicas.len() });
        }
        let mut endpoints = HashSet::new();
        for e in &c.replicas {
            if e == LOCAL_ENDPOINT {
                continue;
            }
            if http_authority(e).is_none() {
                return Err(ConfigError::BadEndpoint(e.clone()));
            }
            if !endpoints.insert(e.trim_end_matches('/')) {
                return Err(ConfigError::DuplicateEndpoint(e.clone()));
            }
        }
        let mut ids = HashSet::new();
        for s in &self.sources {
            s.validate()?;
            if !ids.insert(s.source_id.as_str()) {
                return Err(ConfigError::DuplicateSource(s.source_id.clone()));
            }
        }
        if self.reconcile_every_n_cycles == 0 {
            return Err(ConfigError::BadReconcileCadence);
        }
        if self.health_check_interval_ms == 0 {
            return Err(ConfigError::BadHealthInterval);
        }
        Ok(())
    }

    /// Creates `data_dir` if needed and proves it is writable.
    pub fn prepare_data_dir(&self) -> Result<(), ConfigError> {
        let fail =
            |e: std::io::Error| ConfigError::DataDirNotWritable { path: self.data_dir.clone(), reason: e.to_string() };
        std::fs::create_dir_all(&self.data_dir).map_err(fail)?;
        let probe = self.data_dir.join(".write-probe");
        std::fs::write(&probe, b"ok").map_err(fail)?;
        std::fs::remove_file(&probe).map_err(fail)
    }

    pub fn endpoint(&self, shard: usize, slot: usize) -> &str {
        &self.cluster.replicas[shard * self.cluster.replication_factor + slot]
    }

    pub fn replica_dir(&self, shard: usize, slot: usize) -> PathBuf {
        self.data_dir.join(format!("shard-{shard}")).join(format!("replica-{slot}"))
    }

    pub fn cursor_dir(&self) -> PathBuf {
        self.data_dir.join("cursors")
    }

    /// Where `harvest`/`status` reach a running coordinator.
    pub fn coordinator_url(&self) -> String {
        let host = match self.http.bind.as_str() {
            "0.0.0.0" | "" => "127.0.0.1",
            "::" => "[::1]",
            other => other,
        };
        format!("http://{host}:{}", self.http.port)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base() -> serde_json::Value {
        json!({
            "cluster": {"num_shards": 2, "replication_factor": 2,
                        "replicas": ["local", "local", "http://10.0.0.5:7001", "http://10.0.0.6:7001"]},
            "sources": [{"source_id": "llnl", "base_url": "http://esgf.llnl.gov/esg-search"}],
            "http": {"bind": "0.0.0.0", "port": 9000},
            "data_dir": "/tmp/x"
        })
    }

    fn code(v: serde_json::Value) -> &'static str {
        let cfg = ServiceConfig::from_json(&v.to_string());
        match cfg.and_then(|c| c.validate()) {
            Ok(()) => "ok",
            Err(e) => e.code(),
        }
    }

    #[test]
    fn defaults_and_accessors() {
        let cfg = ServiceConfig::from_json(&base().to_string()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.reconcile_every_n_cycles, 10);
        assert_eq!(cfg.sources[0].page_size, 100);
        assert_eq!(cfg.endpoint(1, 0), "http://10.0.0.5:7001");
        assert_eq!(cfg.coordinator_url(), "http://127.0.0.1:9000");
        assert_eq!(cfg.replica_dir(1, 0), PathBuf::from("/tmp/x/shard-1/replica-0"));
    }

    #[test]
    fn every_violation_has_its_own_code() {
        let mut cases: Vec<(serde_json::Value, &str)> = Vec::new();
        let mut v = base();
        v["cluster"]["num_shards"] = json!(0);
        cases.push((v, "bad_num_shards"));
        let mut v = base();
        v["cluster"]["replication_factor"] = json!(0);
        cases.push((v, "bad_replication_factor"));
        let mut v = base();
        v["cluster"]["replicas"] = json!(["local"]);
        cases.push((v, "endpoint_count_mismatch"));
        let mut v = base();
        v["cluster"]["replicas"][2] = json!("tcp://nope");
        cases.push((v, "bad_endpoint"));
        let mut v = base();
        v["cluster"]["replicas"][3] = json!("http://10.0.0.5:7001/");
        cases.push((v, "duplicate_endpoint"));
        let mut v = base();
        v["sources"][0]["page_size"] = json!(0);
        cases.push((v, "bad_page_size"));
        let mut v = base();
        v["sources"][0]["skew_epsilon_ms"] = json!(-1);
        cases.push((v, "bad_skew"));
        let mut v = base();
        v["sources"][0]["poll_interval_ms"] = json!(0);
        cases.push((v, "bad_poll_interval"));
        let mut v = base();
        v["sources"][0]["source_id"] = json!("../etc");
        cases.push((v, "bad_source_id"));
        let mut v = base();
        v["sources"] = json!([{"source_id": "a", "base_url": "x"}, {"source_id": "a", "base_url": "y"}]);
        cases.push((v, "duplicate_source"));
        let mut v = base();
        v["reconcile_every_n_cycles"] = json!(0);
        cases.push((v, "bad_reconcile_cadence"));
        let mut v = base();
        v["health_check_interval_ms"] = json!(0);
        cases.push((v, "bad_health_interval"));
        let mut v = base();
        v.as_object_mut().unwrap().remove("data_dir");
        cases.push((v, "config_malformed"));

        let mut seen = HashSet::new();
        for (v, want) in cases {
            assert_eq!(code(v), want);
            assert!(seen.insert(want));
        }
    }

    #[test]
    fn data_dir_must_be_writable() {
        let tmp = tempfile::tempdir().unwrap();
        let file = tmp.path().join("plain-file");
        std::fs::write(&file, b"").unwrap();
        let mut cfg = ServiceConfig::from_json(&base().to_string()).unwrap();
        cfg.data_dir = file.join("sub");
        assert_eq!(cfg.prepare_data_dir().unwrap_err().code(), "data_dir_not_writable");
        cfg.data_dir = tmp.path().join("fresh");
        cfg.prepare_data_dir().unwrap();
        assert!(cfg.data_dir.is_dir());
    }

    #[test]
    fn authority_parsing() {
        assert_eq!(http_authority("http://localhost:7001"), Some("localhost:7001"));
        assert_eq!(http_authority("http://h:7001/"), Some("h:7001"));
        assert_eq!(http_authority("http://h"), None);
        assert_eq!(http_authority("http://h:0"), None);
        assert_eq!(http_authority("http://h:1/path"), None);
        assert_eq!(http_authority("https://h:1"), None);
    }
}
