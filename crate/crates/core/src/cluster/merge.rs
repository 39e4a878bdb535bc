use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::index::{result_order, FacetCounts, SearchResult};
use crate::model::MetadataRecord;

struct Head {
    doc: MetadataRecord,
    part: usize,
}

// BinaryHeap is a max-heap; invert so the first doc in result order pops first.
impl Ord for Head {
    fn cmp(&self, other: &Self) -> Ordering {
        result_order(&other.doc, &self.doc).then_with(|| other.part.cmp(&self.part))
    }
}

impl PartialOrd for Head {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Head {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Head {}

/// Combines per-shard results, each already sorted and holding at least
/// `offset + limit` leading docs, into the requested page.
pub fn merge_results(parts: Vec<SearchResult>, offset: usize, limit: usize) -> SearchResult {
    let num_found = parts.iter().map(|p| p.num_found).sum();

    let mut facet_counts = FacetCounts::new();
    let mut streams = Vec::with_capacity(parts.len());
    for part in parts {
        for (field, counts) in part.facet_counts {
            let merged = facet_counts.entry(field).or_default();
            for (value, n) in counts {
                *merged.entry(value).or_default() += n;
            }
        }
        streams.push(part.docs.into_iter());
    }

    let mut heap = BinaryHeap::with_capacity(streams.len());
    for (part, stream) in streams.iter_mut().enumerate() {
        if let Some(doc) = stream.next() {
            heap.push(Head { doc, part });
        }
    }
    let mut docs = Vec::with_capacity(limit.min(1024));
    let mut skipped = 0;
    while docs.len() < limit {
        let Some(Head { doc, part }) = heap.pop() else { break };
        if let Some(next) = streams[part].next() {
            heap.push(Head { doc: next, part });
        }
        if skipped < offset {
            skipped += 1;
        } else {
            docs.push(doc);
        }
    }

    SearchResult { num_found, docs, facet_counts }
}
