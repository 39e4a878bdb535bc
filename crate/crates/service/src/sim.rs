//! Simulated source nodes served over HTTP, plus their control endpoints.
//!
//! `GET /search` and `GET /inventory` speak the harvest protocol.
//! `POST /sim/advance {"to_ms"}` plays the node's script forward and
//! `POST /sim/fault {"mode", ...}` switches fault injection. An unreachable
//! node answers 503 to every protocol request.

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use superindex_core::harvest::{HarvestPage, PageRequest, SourceClient, SourceError, OPEN_END_MS};
use superindex_core::model::parse_timestamp;
use superindex_core::sim::{FaultMode, SimSource};
use superindex_core::RecordKey;

use crate::params::ApiError;

fn error(e: ApiError) -> Response {
    let status = StatusCode::from_u16(e.status).unwrap_or(StatusCode::BAD_REQUEST);
    (status, [("content-type", "application/json")], e.body()).into_response()
}

fn source_error(e: SourceError) -> Response {
    match e {
        SourceError::Unreachable(m) => error(ApiError::new(503, "unavailable", m)),
        SourceError::Protocol(m) => error(ApiError::new(500, "internal", m)),
    }
}

fn param<'a>(params: &'a [(String, String)], name: &str) -> Option<&'a str> {
    params.iter().rev().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
}

fn number(params: &[(String, String)], name: &str, default: usize) -> Result<usize, ApiError> {
    param(params, name).map_or(Ok(default), |v| {
        v.parse().map_err(|_| ApiError::bad_request("bad_param", format!("{name} must be a non-negative integer")))
    })
}

fn instant(params: &[(String, String)], name: &str, default: i64) -> Result<i64, ApiError> {
    param(params, name).map_or(Ok(default), |v| {
        parse_timestamp(v).map_err(|_| ApiError::bad_request("bad_timestamp", format!("{name} must be ISO-8601")))
    })
}

fn keys(params: &[(String, String)]) -> Result<Vec<RecordKey>, ApiError> {
    let types = params.iter().filter(|(k, _)| k == "type").map(|(_, v)| v);
    let ids = params.iter().filter(|(k, _)| k == "id").map(|(_, v)| v);
    let mut keys = Vec::new();
    for (t, id) in types.zip(ids) {
        let t = t.parse().map_err(|_| ApiError::bad_request("bad_type", format!("unknown type {t:?}")))?;
        keys.push(RecordKey::new(t, id.clone()));
    }
    Ok(keys)
}

async fn search(State(src): State<SimSource>, Query(params): Query<Vec<(String, String)>>) -> Response {
    if param(&params, "format").is_some_and(|f| f != "json") {
        return error(ApiError::bad_request("bad_format", "only format=json is supported"));
    }
    let by_key = params.iter().any(|(k, _)| k == "id");
    let parsed = (|| -> Result<_, ApiError> {
        Ok((
            keys(&params)?,
            PageRequest {
                from_ms: instant(&params, "from", 0)?,
                to_ms: instant(&params, "to", OPEN_END_MS)?,
                offset: number(&params, "offset", 0)?,
                limit: number(&params, "limit", 10)?,
            },
        ))
    })();
    let (keys, req) = match parsed {
        Ok(v) => v,
        Err(e) => return error(e),
    };
    let outcome = tokio::task::spawn_blocking(move || {
        if by_key {
            src.fetch(&keys).map(|docs| HarvestPage { num_found: docs.len() as u64, offset: 0, docs })
        } else {
            src.search_page(req)
        }
    })
    .await;
    match outcome {
        Ok(Ok(page)) => Json(page).into_response(),
        Ok(Err(e)) => source_error(e),
        Err(e) => error(ApiError::new(500, "internal", e.to_string())),
    }
}

async fn inventory(State(src): State<SimSource>, Query(params): Query<Vec<(String, String)>>) -> Response {
    let (offset, limit) = match (number(&params, "offset", 0), number(&params, "limit", 100)) {
        (Ok(o), Ok(l)) => (o, l),
        (Err(e), _) | (_, Err(e)) => return error(e),
    };
    match tokio::task::spawn_blocking(move || src.inventory_page(offset, limit)).await {
        Ok(Ok(page)) => Json(page).into_response(),
        Ok(Err(e)) => source_error(e),
        Err(e) => error(ApiError::new(500, "internal", e.to_string())),
    }
}

#[derive(Deserialize)]
struct Advance {
    to_ms: i64,
}

async fn advance(State(src): State<SimSource>, Json(body): Json<Advance>) -> Response {
    match src.advance(body.to_ms) {
        Ok(applied) => {
            Json(json!({"applied": applied, "sim_clock_ms": src.node().read().sim_clock_ms})).into_response()
        }
        Err(e) => error(ApiError::new(409, "script_error", e.to_string())),
    }
}

async fn fault(State(src): State<SimSource>, Json(mode): Json<FaultMode>) -> Response {
    src.set_fault(mode);
    Json(mode).into_response()
}

pub fn sim_router(source: SimSource) -> Router {
    Router::new()
        .route("/search", get(search))
        .route("/inventory", get(inventory))
        .route("/sim/advance", post(advance))
        .route("/sim/fault", post(fault))
        .with_state(source)
}
