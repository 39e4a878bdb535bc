//! Record schema shared by source nodes, the harvester and the index.
//!
//! A [`MetadataRecord`] travels on the wire in its *document form*: a flat JSON
//! object with the header keys `type`, `id`, `version`, `source_node` and
//! `_timestamp`, plus one key per field mapping to an array of strings.
//! [`validate`] also accepts the header key `timestamp_ms` (integer) and a
//! nested `fields` object, which is convenient for hand-written fixtures.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

/// Separates header values, field names and field values in canonical form.
pub const UNIT_SEPARATOR: u8 = 0x1F;
/// Terminates each canonical entry (the header, then one entry per field).
pub const RECORD_SEPARATOR: u8 = 0x1E;

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Header keys of the document form. None of them may be used as a field name.
const RESERVED_KEYS: &[&str] = &["type", "id", "version", "source_node", "timestamp_ms", "fields"];

/// 64-bit FNV-1a over `bytes`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |hash, &b| (hash ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("missing required field `{0}`")]
    MissingField(&'static str),
    #[error("unknown record type `{0}`")]
    UnknownRecordType(String),
    #[error("bad field name `{0}`")]
    BadFieldName(String),
    #[error("field `{0}` has an empty value list")]
    EmptyValueList(String),
    #[error("invalid id {0:?}")]
    InvalidId(String),
    #[error("invalid value for `{field}`: {reason}")]
    InvalidValue { field: String, reason: String },
    #[error("invalid timestamp {0:?}")]
    InvalidTimestamp(String),
}

/// The three metadata collections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordType {
    Dataset,
    File,
    Aggregation,
}

impl RecordType {
    pub const ALL: [RecordType; 3] = [RecordType::Dataset, RecordType::File, RecordType::Aggregation];

    pub fn as_str(self) -> &'static str {
        match self {
            RecordType::Dataset => "Dataset",
            RecordType::File => "File",
            RecordType::Aggregation => "Aggregation",
        }
    }
}

// Wire orderings (inventories, snapshots) sort by type name.
impl Ord for RecordType {
    fn cmp(&self, other: &Self) -> Ordering {
        self.as_str().cmp(other.as_str())
    }
}

impl PartialOrd for RecordType {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for RecordType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecordType {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Dataset" => Ok(RecordType::Dataset),
            "File" => Ok(RecordType::File),
            "Aggregation" => Ok(RecordType::Aggregation),
            other => Err(ModelError::UnknownRecordType(other.to_string())),
        }
    }
}

impl Serialize for RecordType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for RecordType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Unique key of a record: `(record_type, id)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordKey {
    #[serde(rename = "type")]
    pub record_type: RecordType,
    pub id: String,
}

impl RecordKey {
    pub fn new(record_type: RecordType, id: impl Into<String>) -> Self {
        Self { record_type, id: id.into() }
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.record_type, self.id)
    }
}

/// Content digest of a record: FNV-1a/64 over its canonical bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentDigest(pub u64);

impl ContentDigest {
    /// Sixteen lowercase hex characters, the inventory wire form.
    pub fn to_hex(self) -> String {
        format!("{:016x}", self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 16 {
            return None;
        }
        u64::from_str_radix(s, 16).ok().map(ContentDigest)
    }
}

impl fmt::Display for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ContentDigest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentDigest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        ContentDigest::from_hex(&s).ok_or_else(|| serde::de::Error::custom(format!("bad digest {s:?}")))
    }
}

/// One harvested catalog entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataRecord {
    pub record_type: RecordType,
    pub id: String,
    pub version: u64,
    pub source_node: String,
    pub timestamp_ms: i64,
    pub fields: BTreeMap<String, Vec<String>>,
}

impl MetadataRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey::new(self.record_type, self.id.clone())
    }

    /// Ordering tuple used by last-writer-wins comparisons.
    pub fn freshness(&self) -> (u64, i64) {
        (self.version, self.timestamp_ms)
    }

    pub fn field(&self, name: &str) -> &[String] {
        self.fields.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonicalize(self)
    }

    pub fn digest(&self) -> ContentDigest {
        digest(self)
    }

    /// Checks every schema invariant on an already-constructed record.
    pub fn check(&self) -> Result<(), ModelError> {
        check_id(&self.id)?;
        check_text("source_node", &self.source_node)?;
        if self.timestamp_ms <= 0 {
            return Err(ModelError::InvalidTimestamp(self.timestamp_ms.to_string()));
        }
        for (name, values) in &self.fields {
            check_field_name(name)?;
            if values.is_empty() {
                return Err(ModelError::EmptyValueList(name.clone()));
            }
            for v in values {
                check_text(name, v)?;
            }
        }
        Ok(())
    }

    /// External JSON document form.
    pub fn to_document(&self) -> Map<String, Value> {
        let mut doc = Map::new();
        doc.insert("type".into(), Value::from(self.record_type.as_str()));
        doc.insert("id".into(), Value::from(self.id.as_str()));
        doc.insert("version".into(), Value::from(self.version));
        doc.insert("source_node".into(), Value::from(self.source_node.as_str()));
        doc.insert("_timestamp".into(), Value::from(format_timestamp(self.timestamp_ms)));
        for (name, values) in &self.fields {
            doc.insert(name.clone(), Value::from(values.clone()));
        }
        doc
    }

    pub fn from_document(value: &Value) -> Result<Self, ModelError> {
        match value {
            Value::Object(map) => validate(map),
            _ => Err(ModelError::InvalidValue { field: "document".into(), reason: "not a JSON object".into() }),
        }
    }
}

impl Serialize for MetadataRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_document().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for MetadataRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let map = Map::<String, Value>::deserialize(deserializer)?;
        validate(&map).map_err(serde::de::Error::custom)
    }
}

fn check_id(id: &str) -> Result<(), ModelError> {
    if id.is_empty() || id.chars().any(char::is_control) {
        return Err(ModelError::InvalidId(id.to_string()));
    }
    Ok(())
}

// Separator bytes inside text would make the canonical form ambiguous.
fn check_text(field: &str, text: &str) -> Result<(), ModelError> {
    if text.bytes().any(|b| b == UNIT_SEPARATOR || b == RECORD_SEPARATOR) {
        return Err(ModelError::InvalidValue {
            field: field.to_string(),
            reason: "contains a 0x1E/0x1F separator byte".into(),
        });
    }
    Ok(())
}

fn check_field_name(name: &str) -> Result<(), ModelError> {
    let mut chars = name.chars();
    let well_formed =
        matches!(chars.next(), Some('a'..='z')) && chars.all(|c| matches!(c, 'a'..='z' | '0'..='9' | '_'));
    if !well_formed || RESERVED_KEYS.contains(&name) {
        return Err(ModelError::BadFieldName(name.to_string()));
    }
    Ok(())
}

fn string_value<'a>(raw: &'a Map<String, Value>, key: &'static str) -> Result<Option<&'a str>, ModelError> {
    match raw.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(ModelError::InvalidValue { field: key.into(), reason: "expected a string".into() }),
    }
}

fn value_list(name: &str, value: &Value) -> Result<Vec<String>, ModelError> {
    let invalid = |reason: &str| ModelError::InvalidValue { field: name.to_string(), reason: reason.into() };
    let values = match value {
        Value::String(s) => vec![s.clone()],
        Value::Array(items) => items
            .iter()
            .map(|v| v.as_str().map(str::to_string).ok_or_else(|| invalid("expected an array of strings")))
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err(invalid("expected an array of strings")),
    };
    if values.is_empty() {
        return Err(ModelError::EmptyValueList(name.to_string()));
    }
    Ok(values)
}

/// Builds a well-formed record from a parsed key/value document.
pub fn validate(raw: &Map<String, Value>) -> Result<MetadataRecord, ModelError> {
    let id = string_value(raw, "id")?.ok_or(ModelError::MissingField("id"))?;
    check_id(id)?;
    let record_type: RecordType = string_value(raw, "type")?.ok_or(ModelError::MissingField("type"))?.parse()?;

    let version = match raw.get("version") {
        None | Some(Value::Null) => 0,
        Some(v) => v.as_u64().ok_or_else(|| ModelError::InvalidValue {
            field: "version".into(),
            reason: "expected a non-negative integer".into(),
        })?,
    };
    let source_node = string_value(raw, "source_node")?.ok_or(ModelError::MissingField("source_node"))?;
    check_text("source_node", source_node)?;

    let timestamp_ms = match (raw.get("_timestamp"), raw.get("timestamp_ms")) {
        (Some(Value::String(iso)), _) => parse_timestamp(iso)?,
        (Some(other), _) => return Err(ModelError::InvalidTimestamp(other.to_string())),
        (None, Some(ms)) => ms.as_i64().ok_or_else(|| ModelError::InvalidTimestamp(ms.to_string()))?,
        (None, None) => return Err(ModelError::MissingField("timestamp")),
    };
    if timestamp_ms <= 0 {
        return Err(ModelError::InvalidTimestamp(timestamp_ms.to_string()));
    }

    let mut fields = BTreeMap::new();
    let mut insert = |name: &str, value: &Value| -> Result<(), ModelError> {
        check_field_name(name)?;
        let values = value_list(name, value)?;
        for v in &values {
            check_text(name, v)?;
        }
        fields.insert(name.to_string(), values);
        Ok(())
    };
    for (key, value) in raw {
        match key.as_str() {
            "type" | "id" | "version" | "source_node" | "_timestamp" | "timestamp_ms" => {}
            "fields" => match value {
                Value::Object(nested) => {
                    for (name, value) in nested {
                        insert(name, value)?;
                    }
                }
                _ => return Err(ModelError::BadFieldName(key.clone())),
            },
            name => insert(name, value)?,
        }
    }

    Ok(MetadataRecord {
        record_type,
        id: id.to_string(),
        version,
        source_node: source_node.to_string(),
        timestamp_ms,
        fields,
    })
}

/// Deterministic byte form: header entry, then one entry per field in name order.
pub fn canonicalize(r: &MetadataRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(128);
    let version = r.version.to_string();
    let stamp = r.timestamp_ms.to_string();
    let header = [
        r.record_type.as_str().as_bytes(),
        r.id.as_bytes(),
        version.as_bytes(),
        r.source_node.as_bytes(),
        stamp.as_bytes(),
    ];
    push_entry(&mut out, header);
    for (name, values) in &r.fields {
        push_entry(&mut out, std::iter::once(name.as_bytes()).chain(values.iter().map(|v| v.as_bytes())));
    }
    out
}

fn push_entry<'a>(out: &mut Vec<u8>, parts: impl IntoIterator<Item = &'a [u8]>) {
    for (i, part) in parts.into_iter().enumerate() {
        if i > 0 {
            out.push(UNIT_SEPARATOR);
        }
        out.extend_from_slice(part);
    }
    out.push(RECORD_SEPARATOR);
}

pub fn digest(r: &MetadataRecord) -> ContentDigest {
    ContentDigest(fnv1a64(&canonicalize(r)))
}

/// Parses an ISO-8601/RFC 3339 UTC instant with at most millisecond precision.
pub fn parse_timestamp(iso: &str) -> Result<i64, ModelError> {
    let parsed = DateTime::parse_from_rfc3339(iso).map_err(|_| ModelError::InvalidTimestamp(iso.to_string()))?;
    if parsed.timestamp_subsec_nanos() % 1_000_000 != 0 {
        return Err(ModelError::InvalidTimestamp(iso.to_string()));
    }
    Ok(parsed.timestamp_millis())
}

/// Renders `ms` as `YYYY-MM-DDTHH:MM:SS.mmmZ`.
pub fn format_timestamp(ms: i64) -> String {
    DateTime::<Utc>::from_timestamp_millis(ms)
        .map(|dt| dt.to_rfc3339_opts(SecondsFormat::Millis, true))
        .unwrap_or_else(|| ms.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> MetadataRecord {
        let raw = json!({"type": "Dataset", "id": "d1", "version": 0, "timestamp_ms": 1,
                         "source_node": "n1", "fields": {"project": ["CMIP6"]}});
        validate(raw.as_object().unwrap()).unwrap()
    }

    fn raw_with(mutate: impl FnOnce(&mut Map<String, Value>)) -> Map<String, Value> {
        let mut raw = minimal().to_document();
        mutate(&mut raw);
        raw
    }

    #[test]
    fn minimal_dataset_is_valid() {
        let r = minimal();
        assert_eq!(r.record_type, RecordType::Dataset);
        assert_eq!(r.id, "d1");
        assert_eq!(r.version, 0);
        assert_eq!(r.source_node, "n1");
        assert_eq!(r.timestamp_ms, 1);
        assert_eq!(r.field("project"), ["CMIP6"]);
    }

    #[test]
    fn missing_required_fields() {
        assert_eq!(validate(&raw_with(|m| drop(m.remove("id")))), Err(ModelError::MissingField("id")));
        assert_eq!(validate(&raw_with(|m| drop(m.remove("type")))), Err(ModelError::MissingField("type")));
        assert_eq!(validate(&raw_with(|m| drop(m.remove("_timestamp")))), Err(ModelError::MissingField("timestamp")));
    }

    #[test]
    fn unknown_type_rejected() {
        let raw = raw_with(|m| drop(m.insert("type".into(), json!("Granule"))));
        assert_eq!(validate(&raw), Err(ModelError::UnknownRecordType("Granule".into())));
    }

    #[test]
    fn field_name_and_value_checks() {
        let raw = raw_with(|m| drop(m.insert("Project".into(), json!(["x"]))));
        assert_eq!(validate(&raw), Err(ModelError::BadFieldName("Project".into())));
        let raw = raw_with(|m| drop(m.insert("9lives".into(), json!(["x"]))));
        assert!(matches!(validate(&raw), Err(ModelError::BadFieldName(_))));
        let raw = raw_with(|m| drop(m.insert("variable".into(), json!([]))));
        assert_eq!(validate(&raw), Err(ModelError::EmptyValueList("variable".into())));
        let raw = raw_with(|m| drop(m.insert("id".into(), json!("a\nb"))));
        assert!(matches!(validate(&raw), Err(ModelError::InvalidId(_))));
        let raw = raw_with(|m| drop(m.insert("id".into(), json!(""))));
        assert!(matches!(validate(&raw), Err(ModelError::InvalidId(_))));
        let raw = raw_with(|m| drop(m.insert("title".into(), json!(["a\u{1f}b"]))));
        assert!(matches!(validate(&raw), Err(ModelError::InvalidValue { .. })));
        let raw = raw_with(|m| drop(m.insert("_timestamp".into(), json!("not a time"))));
        assert!(matches!(validate(&raw), Err(ModelError::InvalidTimestamp(_))));
    }

    #[test]
    fn canonical_bytes_of_minimal_record() {
        // Hand-assembled: header entry then the single `project` entry.
        let expected = b"Dataset\x1fd1\x1f0\x1fn1\x1f1\x1eproject\x1fCMIP6\x1e";
        assert_eq!(canonicalize(&minimal()), expected.to_vec());
    }

    #[test]
    fn canonical_form_ignores_insertion_order_but_not_values() {
        let a = validate(
            json!({"type": "File", "id": "f", "source_node": "n", "timestamp_ms": 5,
                                "variable": ["tas"], "project": ["CMIP6"]})
            .as_object()
            .unwrap(),
        )
        .unwrap();
        let b = validate(
            json!({"project": ["CMIP6"], "timestamp_ms": 5, "variable": ["tas"],
                                "source_node": "n", "id": "f", "type": "File"})
            .as_object()
            .unwrap(),
        )
        .unwrap();
        assert_eq!(canonicalize(&a), canonicalize(&b));
        let mut c = a.clone();
        c.fields.insert("variable".into(), vec!["pr".into()]);
        assert_ne!(canonicalize(&a), canonicalize(&c));
        let mut d = a.clone();
        d.fields.insert("project".into(), vec!["CMIP6".into(), "CMIP5".into()]);
        let mut e = a.clone();
        e.fields.insert("project".into(), vec!["CMIP5".into(), "CMIP6".into()]);
        assert_ne!(digest(&d), digest(&e));
    }

    #[test]
    fn fnv_offset_basis_for_empty_input() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
    }

    #[test]
    fn digest_of_minimal_record() {
        // Frozen from an independent FNV-1a run over the canonical bytes above.
        assert_eq!(digest(&minimal()), ContentDigest(0x5dcc_867f_e871_e6b9));
        assert_eq!(digest(&minimal()).to_hex(), "5dcc867fe871e6b9");
    }

    #[test]
    fn timestamp_conversion_is_exact() {
        assert_eq!(parse_timestamp("2018-12-01T00:00:00.000Z").unwrap(), 1_543_622_400_000);
        assert_eq!(format_timestamp(1_543_622_400_000), "2018-12-01T00:00:00.000Z");
        assert_eq!(format_timestamp(1_543_622_400_123), "2018-12-01T00:00:00.123Z");
        assert!(parse_timestamp("2018-12-01T00:00:00.0001Z").is_err());
    }

    #[test]
    fn record_type_orders_by_name() {
        let mut types = RecordType::ALL.to_vec();
        types.sort();
        assert_eq!(types, [RecordType::Aggregation, RecordType::Dataset, RecordType::File]);
    }
}
