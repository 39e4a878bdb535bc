//! Seeded corpus generator with a CMIP-style facet vocabulary.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{fnv1a64, MetadataRecord, RecordType};

pub const PROJECTS: [&str; 3] = ["CMIP5", "CMIP6", "obs4MIPs"];

pub const VARIABLES: [&str; 20] = [
    "tas", "pr", "psl", "uas", "vas", "hurs", "huss", "rlds", "rsds", "rlut", "rsut", "clt", "evspsbl", "sfcWind",
    "tasmax", "tasmin", "ts", "zg", "ua", "va",
];

pub const INSTITUTES: [&str; 10] =
    ["NCAR", "NASA-GISS", "NOAA-GFDL", "MOHC", "IPSL", "MPI-M", "CNRM-CERFACS", "MIROC", "CSIRO", "BCC"];

pub const EXPERIMENTS: [&str; 5] = ["historical", "ssp245", "ssp585", "piControl", "amip"];

pub const FREQUENCIES: [&str; 4] = ["mon", "day", "6hr", "fx"];

/// 2018-01-01T00:00:00.000Z
pub const SIM_YEAR_START_MS: i64 = 1_514_764_800_000;
pub const SIM_YEAR_MS: i64 = 365 * 86_400_000;
pub const SIM_YEAR_END_MS: i64 = SIM_YEAR_START_MS + SIM_YEAR_MS;

pub(crate) fn rng_for(seed: u64, source_id: &str, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(source_id.as_bytes()));
    rng.set_stream(stream);
    rng
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words.choose(rng).expect("vocabulary is non-empty")
}

/// Random facet/payload fields for a record.
pub(crate) fn random_fields(rng: &mut ChaCha8Rng, source_id: &str, id: &str) -> BTreeMap<String, Vec<String>> {
    let project = pick(rng, &PROJECTS);
    let institute = pick(rng, &INSTITUTES);
    let experiment = pick(rng, &EXPERIMENTS);
    let frequency = pick(rng, &FREQUENCIES);
    let mut variables = vec![pick(rng, &VARIABLES).to_string()];
    if rng.random_bool(0.2) {
        let second = pick(rng, &VARIABLES);
        if second != variables[0] {
            variables.push(second.to_string());
        }
    }
    let title = format!("{project} {institute} {experiment} {} {frequency}", variables.join(" "));
    let url = format!("http://{source_id}.example.org/thredds/fileServer/{project}/{id}.nc");

    let mut fields = BTreeMap::new();
    fields.insert("project".into(), vec![project.to_string()]);
    fields.insert("institute".into(), vec![institute.to_string()]);
    fields.insert("experiment".into(), vec![experiment.to_string()]);
    fields.insert("frequency".into(), vec![frequency.to_string()]);
    fields.insert("variable".into(), variables);
    fields.insert("title".into(), vec![title]);
    fields.insert("url".into(), vec![url]);
    fields
}

pub(crate) fn random_type(rng: &mut ChaCha8Rng) -> RecordType {
    match rng.random_range(0..20) {
        0..=9 => RecordType::Dataset,
        10..=16 => RecordType::File,
        _ => RecordType::Aggregation,
    }
}

/// `n` deterministic records with ids `{source_id}-{k}`, stamped within the simulated year.
pub fn generate_corpus(seed: u64, n: usize, source_id: &str) -> Vec<MetadataRecord> {
    let mut rng = rng_for(seed, source_id, 0);
    (0..n)
        .map(|k| {
            let id = format!("{source_id}-{k}");
            let record_type = random_type(&mut rng);
            let timestamp_ms = SIM_YEAR_START_MS + rng.random_range(0..SIM_YEAR_MS);
            let fields = random_fields(&mut rng, source_id, &id);
            MetadataRecord { record_type, id, version: 0, source_node: source_id.to_string(), timestamp_ms, fields }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_deterministic() {
        assert!(generate_corpus(1, 0, "n1").is_empty());
        assert_eq!(generate_corpus(7, 50, "n1"), generate_corpus(7, 50, "n1"));
        assert_ne!(generate_corpus(7, 50, "n1"), generate_corpus(8, 50, "n1"));
    }

    #[test]
    fn records_are_valid_and_in_range() {
        for r in generate_corpus(3, 300, "node-a") {
            r.check().unwrap();
            assert!(r.id.starts_with("node-a-"));
            assert!((SIM_YEAR_START_MS..SIM_YEAR_END_MS).contains(&r.timestamp_ms));
            assert!(PROJECTS.contains(&r.field("project")[0].as_str()));
        }
        let types: std::collections::BTreeSet<_> =
            generate_corpus(3, 300, "node-a").iter().map(|r| r.record_type).collect();
        assert_eq!(types.len(), 3);
    }
}
