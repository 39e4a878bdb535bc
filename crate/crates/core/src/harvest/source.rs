//! The harvest protocol every source node exposes.
//!
//! `GET {base}/search?format=json&from=ISO&to=ISO&offset=n&limit=n` returns
//! `{"numFound", "offset", "docs"}` ordered by `(timestamp asc, id asc)`;
//! `GET {base}/inventory?offset=n&limit=n` returns `{"numFound", "items"}`
//! ordered by `(type, id)`. Re-fetching specific records uses the search
//! endpoint with repeated `type` + `id` parameters.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::cluster::InventoryItem;
use crate::model::{MetadataRecord, RecordKey};

/// `to` bound used for open-ended harvests: 9999-12-31T23:59:59.999Z.
pub const OPEN_END_MS: i64 = 253_402_300_799_999;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SourceError {
    #[error("source unreachable: {0}")]
    Unreachable(String),
    #[error("malformed source response: {0}")]
    Protocol(String),
}

/// A time-window page request; `from_ms` inclusive, `to_ms` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageRequest {
    pub from_ms: i64,
    pub to_ms: i64,
    pub offset: usize,
    pub limit: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HarvestPage {
    #[serde(rename = "numFound")]
    pub num_found: u64,
    pub offset: u64,
    pub docs: Vec<MetadataRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InventoryPage {
    #[serde(rename = "numFound")]
    pub num_found: u64,
    pub items: Vec<InventoryItem>,
}

/// Client side of the harvest protocol.
pub trait SourceClient: Send + Sync {
    fn search_page(&self, req: PageRequest) -> Result<HarvestPage, SourceError>;
    fn inventory_page(&self, offset: usize, limit: usize) -> Result<InventoryPage, SourceError>;
    /// Current versions of the given records; keys the source no longer holds are omitted.
    fn fetch(&self, keys: &[RecordKey]) -> Result<Vec<MetadataRecord>, SourceError>;
}

/// Harvest order: timestamp ascending, then id, then type.
pub fn harvest_order(a: &MetadataRecord, b: &MetadataRecord) -> Ordering {
    a.timestamp_ms.cmp(&b.timestamp_ms).then_with(|| a.id.cmp(&b.id)).then_with(|| a.record_type.cmp(&b.record_type))
}
