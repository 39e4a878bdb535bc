use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{MetadataRecord, RecordType};

/// Upper bound on `offset + limit`; every shard returns that many docs to the coordinator.
pub const MAX_RESULT_WINDOW: usize = 1_000_000;

pub const DEFAULT_LIMIT: usize = 10;

pub type FacetCounts = BTreeMap<String, BTreeMap<String, u64>>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QueryError {
    #[error("offset + limit = {0} exceeds the result window of {MAX_RESULT_WINDOW}")]
    WindowTooLarge(usize),
}

/// A parsed search request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuerySpec {
    /// Whitespace-separated terms, all required. Empty matches everything.
    pub query_text: String,
    /// Exact `(field, value)` constraints, all required.
    pub filters: Vec<(String, String)>,
    pub record_type: RecordType,
    pub facet_fields: Vec<String>,
    /// Inclusive lower bound on `timestamp_ms`.
    pub from_ms: Option<i64>,
    /// Exclusive upper bound on `timestamp_ms`.
    pub to_ms: Option<i64>,
    pub offset: usize,
    pub limit: usize,
}

impl Default for QuerySpec {
    fn default() -> Self {
        Self {
            query_text: String::new(),
            filters: Vec::new(),
            record_type: RecordType::Dataset,
            facet_fields: Vec::new(),
            from_ms: None,
            to_ms: None,
            offset: 0,
            limit: DEFAULT_LIMIT,
        }
    }
}

impl QuerySpec {
    pub fn match_all(record_type: RecordType) -> Self {
        Self { record_type, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), QueryError> {
        let window = self.offset.saturating_add(self.limit);
        if window > MAX_RESULT_WINDOW {
            return Err(QueryError::WindowTooLarge(window));
        }
        Ok(())
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut tokens: Vec<String> = tokenize(&self.query_text).collect();
        tokens.sort();
        tokens.dedup();
        tokens
    }

    pub fn in_window(&self, timestamp_ms: i64) -> bool {
        self.from_ms.is_none_or(|from| timestamp_ms >= from) && self.to_ms.is_none_or(|to| timestamp_ms < to)
    }
}

/// Matched docs for one page, the total match count, and facet counts over all matches.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SearchResult {
    pub num_found: u64,
    pub docs: Vec<MetadataRecord>,
    pub facet_counts: FacetCounts,
}

impl SearchResult {
    pub fn doc_ids(&self) -> Vec<&str> {
        self.docs.iter().map(|d| d.id.as_str()).collect()
    }
}

fn is_separator(c: char) -> bool {
    c.is_whitespace() || matches!(c, '/' | '.' | ',' | ':' | ';' | '=')
}

/// Lowercases and splits on whitespace and `/.,:;=`. Empty pieces are dropped.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(is_separator).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

/// Result order: newest first, then id ascending.
pub fn result_order(a: &MetadataRecord, b: &MetadataRecord) -> Ordering {
    b.timestamp_ms.cmp(&a.timestamp_ms).then_with(|| a.id.cmp(&b.id))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_on_separators_and_lowercases() {
        let tokens: Vec<String> = tokenize("CMIP6.CMIP  http://esgf.llnl.gov/a=b;c,d:e").collect();
        assert_eq!(tokens, ["cmip6", "cmip", "http", "esgf", "llnl", "gov", "a", "b", "c", "d", "e"]);
        assert_eq!(tokenize("  \t ").count(), 0);
    }

    #[test]
    fn window_bound() {
        let q = QuerySpec { offset: 999_990, limit: 10, ..QuerySpec::default() };
        assert!(q.validate().is_ok());
        let q = QuerySpec { offset: 999_991, limit: 10, ..QuerySpec::default() };
        assert_eq!(q.validate(), Err(QueryError::WindowTooLarge(1_000_001)));
        let q = QuerySpec { offset: usize::MAX, limit: 10, ..QuerySpec::default() };
        assert!(q.validate().is_err());
    }

    #[test]
    fn time_window_is_half_open() {
        let q = QuerySpec { from_ms: Some(10), to_ms: Some(20), ..QuerySpec::default() };
        assert!(!q.in_window(9));
        assert!(q.in_window(10));
        assert!(q.in_window(19));
        assert!(!q.in_window(20));
    }
}
