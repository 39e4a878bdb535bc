//! Search request parsing and response rendering.
//!
//! Reserved parameters are `q`, `type`, `facets`, `fields`, `offset`, `limit`,
//! `from`, `to` and `format`; every other parameter is an exact-match field
//! filter and may repeat.

use serde_json::{json, Map, Value};
use superindex_core::index::{QuerySpec, SearchResult, DEFAULT_LIMIT, MAX_RESULT_WINDOW};
use superindex_core::model::parse_timestamp;
use superindex_core::RecordType;

pub const RESERVED: [&str; 9] = ["q", "type", "facets", "fields", "offset", "limit", "from", "to", "format"];

/// Header keys every rendered document keeps, whatever `fields` asks for.
const HEADER_KEYS: [&str; 5] = ["type", "id", "version", "source_node", "_timestamp"];

/// A client-facing error: HTTP status plus a machine-readable code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: u16,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: u16, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    pub fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(400, code, message)
    }

    pub fn body(&self) -> Vec<u8> {
        serde_json::to_vec(&json!({"error": self.code, "message": self.message})).expect("plain JSON")
    }
}

fn last<'a>(params: &'a [(String, String)], name: &str) -> Option<&'a str> {
    params.iter().rev().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
}

fn count(params: &[(String, String)], name: &str, code: &'static str, default: usize) -> Result<usize, ApiError> {
    match last(params, name) {
        None => Ok(default),
        Some(raw) => raw
            .trim()
            .parse::<usize>()
            .map_err(|_| ApiError::bad_request(code, format!("{name} must be a non-negative integer, got {raw:?}"))),
    }
}

fn instant(params: &[(String, String)], name: &str) -> Result<Option<i64>, ApiError> {
    last(params, name)
        .map(|raw| {
            parse_timestamp(raw)
                .map_err(|_| ApiError::bad_request("bad_timestamp", format!("{name} must be ISO-8601, got {raw:?}")))
        })
        .transpose()
}

fn list(raw: Option<&str>) -> Vec<String> {
    raw.map(|s| s.split(',').map(str::trim).filter(|f| !f.is_empty()).map(String::from).collect()).unwrap_or_default()
}

/// Maps query parameters onto a [`QuerySpec`].
pub fn parse_search_request(params: &[(String, String)]) -> Result<QuerySpec, ApiError> {
    if let Some(format) = last(params, "format") {
        if format != "json" {
            return Err(ApiError::bad_request("bad_format", format!("only format=json is supported, got {format:?}")));
        }
    }
    let record_type = match last(params, "type") {
        None => RecordType::Dataset,
        Some(raw) => raw.parse().map_err(|_| {
            ApiError::bad_request("bad_type", format!("type must be Dataset, File or Aggregation, got {raw:?}"))
        })?,
    };
    let offset = count(params, "offset", "bad_offset", 0)?;
    let limit = count(params, "limit", "bad_limit", DEFAULT_LIMIT)?;
    if offset.saturating_add(limit) > MAX_RESULT_WINDOW {
        return Err(ApiError::bad_request(
            "page_bound_exceeded",
            format!("offset + limit must not exceed {MAX_RESULT_WINDOW}"),
        ));
    }
    let filters =
        params.iter().filter(|(k, _)| !RESERVED.contains(&k.as_str())).map(|(k, v)| (k.clone(), v.clone())).collect();
    Ok(QuerySpec {
        query_text: last(params, "q").unwrap_or_default().to_string(),
        filters,
        record_type,
        facet_fields: list(last(params, "facets")),
        from_ms: instant(params, "from")?,
        to_ms: instant(params, "to")?,
        offset,
        limit,
    })
}

/// Field projection requested with `fields=a,b`; `None` means everything.
pub fn requested_fields(params: &[(String, String)]) -> Option<Vec<String>> {
    last(params, "fields").map(|raw| list(Some(raw)))
}

/// Flattens a JSON request body (`{"q": "...", "project": ["a", "b"]}`) into parameters.
pub fn body_params(body: &Value) -> Result<Vec<(String, String)>, ApiError> {
    let obj = body.as_object().ok_or_else(|| ApiError::bad_request("bad_body", "search body must be a JSON object"))?;
    let scalar = |k: &str, v: &Value| match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        _ => Err(ApiError::bad_request("bad_body", format!("parameter {k} must be a string, number or list"))),
    };
    let mut params = Vec::new();
    for (k, v) in obj {
        match v {
            Value::Array(items) => {
                for item in items {
                    params.push((k.clone(), scalar(k, item)?));
                }
            }
            other => params.push((k.clone(), scalar(k, other)?)),
        }
    }
    Ok(params)
}

/// The search response body. Keys are sorted at every level, so equal results
/// always produce identical bytes.
pub fn render_search(result: &SearchResult, offset: usize, fields: Option<&[String]>) -> Vec<u8> {
    let docs: Vec<Value> = result
        .docs
        .iter()
        .map(|d| {
            let mut doc = d.to_document();
            if let Some(keep) = fields {
                doc.retain(|k, _| HEADER_KEYS.contains(&k.as_str()) || keep.iter().any(|f| f == k));
            }
            Value::Object(doc)
        })
        .collect();
    let mut body = Map::new();
    body.insert("numFound".into(), json!(result.num_found));
    body.insert("offset".into(), json!(offset));
    body.insert("docs".into(), Value::Array(docs));
    body.insert("facet_counts".into(), json!(result.facet_counts));
    serde_json::to_vec(&Value::Object(body)).expect("plain JSON")
}
