//! Harvest-protocol client for source nodes reached over HTTP.

use std::time::Duration;

use serde::de::DeserializeOwned;
use superindex_core::harvest::{HarvestPage, InventoryPage, PageRequest, SourceClient, SourceError};
use superindex_core::model::format_timestamp;
use superindex_core::{MetadataRecord, RecordKey};

use crate::replica::http_agent;

/// A source node reached over HTTP. Clones share the connection pool.
#[derive(Clone)]
pub struct HttpSource {
    base: String,
    agent: ureq::Agent,
}

impl HttpSource {
    pub fn new(base_url: &str) -> Self {
        Self::with_timeout(base_url, Duration::from_secs(60))
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Self {
        Self { base: base_url.trim_end_matches('/').to_string(), agent: http_agent(timeout) }
    }

    fn get<T: DeserializeOwned>(&self, path: &str, query: &[(&str, String)]) -> Result<T, SourceError> {
        let url = format!("{}{path}", self.base);
        let mut req = self.agent.get(&url);
        for (k, v) in query {
            req = req.query(*k, v);
        }
        let mut resp = req.call().map_err(|e| SourceError::Unreachable(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(if status >= 500 {
                SourceError::Unreachable(format!("{url}: status {status}"))
            } else {
                SourceError::Protocol(format!("{url}: status {status}"))
            });
        }
        let body = resp
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_vec()
            .map_err(|e| SourceError::Unreachable(format!("{url}: {e}")))?;
        serde_json::from_slice(&body).map_err(|e| SourceError::Protocol(format!("{url}: {e}")))
    }
}

impl SourceClient for HttpSource {
    fn search_page(&self, req: PageRequest) -> Result<HarvestPage, SourceError> {
        self.get(
            "/search",
            &[
                ("format", "json".into()),
                ("from", format_timestamp(req.from_ms)),
                ("to", format_timestamp(req.to_ms)),
                ("offset", req.offset.to_string()),
                ("limit", req.limit.to_string()),
            ],
        )
    }

    fn inventory_page(&self, offset: usize, limit: usize) -> Result<InventoryPage, SourceError> {
        self.get("/inventory", &[("offset", offset.to_string()), ("limit", limit.to_string())])
    }

    fn fetch(&self, keys: &[RecordKey]) -> Result<Vec<MetadataRecord>, SourceError> {
        if keys.is_empty() {
            return Ok(Vec::new());
        }
        let mut query = vec![("format", "json".to_string()), ("limit", keys.len().to_string())];
        for k in keys {
            query.push(("type", k.record_type.as_str().to_string()));
            query.push(("id", k.id.clone()));
        }
        let page: HarvestPage = self.get("/search", &query)?;
        Ok(page.docs)
    }
}
