//! Shared test helpers: a linear-scan search oracle and seeded query generators.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use superindex_core::index::FacetCounts;
use superindex_core::sim::{EXPERIMENTS, FREQUENCIES, INSTITUTES, PROJECTS, VARIABLES};
use superindex_core::{MetadataRecord, QuerySpec, RecordType, SearchResult};

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

/// Compact comparison key for results: totals, id order and facets.
pub fn shape(r: &SearchResult) -> (u64, Vec<String>, FacetCounts) {
    (r.num_found, r.docs.iter().map(|d| d.id.clone()).collect(), r.facet_counts.clone())
}
