use crate::model::{fnv1a64, RecordType};

/// Shard owning `(record_type, id)`: FNV-1a/64 of `"<type>/<id>"` modulo `num_shards`.
pub fn route(record_type: RecordType, id: &str, num_shards: usize) -> usize {
    assert!(num_shards > 0, "num_shards must be at least 1");
    let key = format!("{}/{}", record_type.as_str(), id);
    (fnv1a64(key.as_bytes()) % num_shards as u64) as usize
}
