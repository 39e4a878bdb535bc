mod common;

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;

use common::{oracle_search, random_query, shape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use superindex_core::index::{decode_frames, encode_frame, LogEntry, WriteOp};
use superindex_core::sim::{generate_corpus, SIM_YEAR_END_MS, SIM_YEAR_START_MS};
use superindex_core::{Index, MetadataRecord, QuerySpec, RecordKey, RecordType};

fn corpus(seed: u64, n: usize) -> Vec<MetadataRecord> {
    let mut docs = generate_corpus(seed, n / 2, "llnl");
    docs.extend(generate_corpus(seed, n - n / 2, "dkrz"));
    docs
}

fn loaded(docs: &[MetadataRecord]) -> Index {
    let index = Index::in_memory();
    for d in docs {
        index.upsert(d.clone()).unwrap();
    }
    index.commit().unwrap();
    index
}

const YEAR: (i64, i64) = (SIM_YEAR_START_MS, SIM_YEAR_END_MS);

#[test]
fn fifty_queries_match_linear_scan() {
    let docs = corpus(3, 500);
    let index = loaded(&docs);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut nonempty = 0;
    for _ in 0..50 {
        let q = random_query(&mut rng, YEAR);
        let got = index.search(&q).unwrap();
        let want = oracle_search(&docs, &q);
        assert_eq!(shape(&got), shape(&want), "{q:?}");
        assert_eq!(got, want);
        nonempty += usize::from(got.num_found > 0);
    }
    assert!(nonempty > 15, "query generator too selective: {nonempty}");
}

#[test]
fn thousand_upserts_visible_only_after_commit() {
    let docs = generate_corpus(8, 1000, "ipsl");
    let index = Index::in_memory();
    for d in &docs {
        index.upsert(d.clone()).unwrap();
    }
    assert_eq!(index.snapshot().doc_count(), 0);
    let point = index.commit().unwrap();
    assert_eq!(point.doc_count, 1000);
    assert_eq!(index.snapshot().doc_count(), 1000);
    let by_type: u64 = RecordType::ALL.iter().map(|&t| index.snapshot().count(t)).sum();
    assert_eq!(by_type, 1000);
}

#[test]
fn two_hundred_step_replay_matches_map() {
    let pool = generate_corpus(5, 60, "ornl");
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let index = Index::in_memory();
    let mut oracle: HashMap<RecordKey, MetadataRecord> = HashMap::new();
    for step in 0..200u64 {
        let mut rec = pool[rng.random_range(0..pool.len())].clone();
        if rng.random_bool(0.3) {
            index.delete(rec.record_type, &rec.id).unwrap();
            oracle.remove(&rec.key());
        } else {
            rec.version = step;
            index.upsert(rec.clone()).unwrap();
            oracle.insert(rec.key(), rec);
        }
        if step % 17 == 0 {
            index.commit().unwrap();
        }
    }
    index.commit().unwrap();
    let mut want: Vec<MetadataRecord> = oracle.into_values().collect();
    want.sort_by_key(|r| r.key());
    assert_eq!(index.snapshot().docs(), want);
}

#[test]
fn reopen_replays_log_and_drops_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    let docs = generate_corpus(1, 40, "nci");
    {
        let index = Index::open(dir.path()).unwrap();
        for d in &docs[..30] {
            index.upsert(d.clone()).unwrap();
        }
        index.commit().unwrap();
        index.checkpoint().unwrap();
        for d in &docs[30..] {
            index.upsert(d.clone()).unwrap();
        }
        index.delete(docs[0].record_type, &docs[0].id).unwrap();
        index.commit().unwrap();
    }
    // A crash mid-append leaves half a frame behind.
    let extra = encode_frame(&LogEntry::new(999, WriteOp::Commit));
    let mut f = OpenOptions::new().append(true).open(dir.path().join("oplog.bin")).unwrap();
    f.write_all(&extra[..extra.len() / 2]).unwrap();
    drop(f);

    let index = Index::open(dir.path()).unwrap();
    assert_eq!(index.snapshot().doc_count(), 39);
    assert_eq!(index.last_seq(), 31 + 11 + 1);
    let log = std::fs::read(dir.path().join("oplog.bin")).unwrap();
    let decoded = decode_frames(&log).unwrap();
    assert!(!decoded.torn_tail);
    assert_eq!(decoded.entries.len(), 12);
}

#[test]
fn old_snapshot_is_frozen() {
    let docs = corpus(4, 100);
    let index = loaded(&docs[..50]);
    let before = index.snapshot();
    let q = QuerySpec { limit: 100, facet_fields: vec!["project".into()], ..QuerySpec::default() };
    let first = before.search(&q).unwrap();
    for d in &docs[50..] {
        index.upsert(d.clone()).unwrap();
    }
    index.delete(docs[0].record_type, &docs[0].id).unwrap();
    index.commit().unwrap();
    assert_eq!(before.search(&q).unwrap(), first);
    assert_ne!(index.search(&q).unwrap(), first);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn index_equals_oracle(seed in 0u64..1000, n in 0usize..300, qseed in 0u64..1000) {
        let docs = corpus(seed, n);
        let index = loaded(&docs);
        let mut rng = ChaCha8Rng::seed_from_u64(qseed);
        for _ in 0..10 {
            let q = random_query(&mut rng, YEAR);
            prop_assert_eq!(index.search(&q).unwrap(), oracle_search(&docs, &q));
        }
    }

    #[test]
    fn single_valued_facet_sums_to_num_found(seed in 0u64..1000, qseed in 0u64..1000) {
        let docs = corpus(seed, 200);
        let index = loaded(&docs);
        let mut rng = ChaCha8Rng::seed_from_u64(qseed);
        let mut q = random_query(&mut rng, YEAR);
        q.facet_fields = vec!["project".into(), "institute".into()];
        let r = index.search(&q).unwrap();
        for field in &q.facet_fields {
            prop_assert_eq!(r.facet_counts[field].values().sum::<u64>(), r.num_found);
        }
    }

    #[test]
    fn pages_partition_the_result(seed in 0u64..1000, page in 1usize..30) {
        let docs = corpus(seed, 150);
        let index = loaded(&docs);
        let all = index.search(&QuerySpec { limit: 1000, ..QuerySpec::default() }).unwrap();
        let mut stitched = Vec::new();
        let mut offset = 0;
        loop {
            let r = index.search(&QuerySpec { offset, limit: page, ..QuerySpec::default() }).unwrap();
            prop_assert_eq!(r.num_found, all.num_found);
            if r.docs.is_empty() { break; }
            offset += r.docs.len();
            stitched.extend(r.docs);
        }
        prop_assert_eq!(stitched, all.docs);
    }

    #[test]
    fn repeated_upsert_is_idempotent(seed in 0u64..1000, repeats in 1usize..4) {
        let docs = corpus(seed, 80);
        let once = loaded(&docs);
        let many = Index::in_memory();
        for _ in 0..repeats {
            for d in &docs {
                many.upsert(d.clone()).unwrap();
            }
            many.commit().unwrap();
        }
        prop_assert_eq!(once.snapshot().docs(), many.snapshot().docs());
        prop_assert_eq!(once.snapshot().inventory(None), many.snapshot().inventory(None));
    }
}
