//! The coordinator's client-facing HTTP API.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use superindex_core::harvest::Scheduler;
use superindex_core::{Cluster, ClusterError, Harvester};

use crate::params::{body_params, parse_search_request, render_search, requested_fields, ApiError};

/// Everything the HTTP handlers need.
pub struct Coordinator {
    pub cluster: Arc<Cluster>,
    pub harvester: Arc<Harvester>,
    pub scheduler: Arc<Scheduler>,
}

impl Coordinator {
    pub fn new(harvester: Arc<Harvester>, scheduler: Arc<Scheduler>) -> Self {
        Self { cluster: harvester.cluster().clone(), harvester, scheduler }
    }

    /// Search by parameters; the body is the rendered response.
    pub fn search(&self, params: &[(String, String)]) -> Result<Vec<u8>, ApiError> {
        let q = parse_search_request(params)?;
        let fields = requested_fields(params);
        let result = self.cluster.scatter_gather(&q).map_err(cluster_error)?;
        Ok(render_search(&result, q.offset, fields.as_deref()))
    }

    pub fn status(&self) -> Value {
        let cursors: BTreeMap<String, Value> =
            self.harvester.cursors().all().into_iter().map(|c| (c.source_id.clone(), json!(c))).collect();
        let doc_counts = match self.cluster.doc_counts() {
            Ok(counts) => json!(counts.into_iter().map(|(t, n)| (t.as_str(), n)).collect::<BTreeMap<_, _>>()),
            Err(_) => Value::Null,
        };
        json!({
            "cluster": self.cluster.state(),
            "cursors": cursors,
            "doc_counts": doc_counts,
            "sources": self.scheduler.statuses(),
        })
    }
}

fn cluster_error(e: ClusterError) -> ApiError {
    match e {
        ClusterError::IncompleteCoverage { shard } => {
            ApiError::new(503, "incomplete_coverage", format!("shard {shard} has no live replica"))
        }
        ClusterError::Query(q) => ApiError::bad_request("page_bound_exceeded", q.to_string()),
        other => ApiError::new(500, "internal", other.to_string()),
    }
}

fn json_bytes(status: u16, body: Vec<u8>) -> Response {
    let status = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [("content-type", "application/json")], body).into_response()
}

fn error_response(e: ApiError) -> Response {
    json_bytes(e.status, e.body())
}

type Shared = Arc<Coordinator>;

async fn run_search(c: Shared, params: Vec<(String, String)>) -> Response {
    match tokio::task::spawn_blocking(move || c.search(&params)).await {
        Ok(Ok(body)) => json_bytes(200, body),
        Ok(Err(e)) => error_response(e),
        Err(e) => error_response(ApiError::new(500, "internal", e.to_string())),
    }
}

async fn search_get(State(c): State<Shared>, Query(params): Query<Vec<(String, String)>>) -> Response {
    run_search(c, params).await
}

async fn search_post(State(c): State<Shared>, Json(body): Json<Value>) -> Response {
    match body_params(&body) {
        Ok(params) => run_search(c, params).await,
        Err(e) => error_response(e),
    }
}

async fn status(State(c): State<Shared>) -> Response {
    match tokio::task::spawn_blocking(move || c.status()).await {
        Ok(v) => json_bytes(200, serde_json::to_vec(&v).expect("plain JSON")),
        Err(e) => error_response(ApiError::new(500, "internal", e.to_string())),
    }
}

#[derive(Deserialize)]
struct HarvestRequest {
    source_id: String,
    #[serde(default)]
    full: bool,
}

async fn admin_harvest(State(c): State<Shared>, Json(req): Json<HarvestRequest>) -> Response {
    let id = req.source_id.clone();
    let outcome = tokio::task::spawn_blocking(move || c.scheduler.trigger(&req.source_id, req.full)).await;
    match outcome {
        Ok(None) => error_response(ApiError::new(404, "unknown_source", format!("no source {id:?} configured"))),
        Ok(Some(Ok(stats))) => json_bytes(200, serde_json::to_vec(&json!({"source_id": id, "stats": stats})).unwrap()),
        Ok(Some(Err(e))) => error_response(ApiError::new(502, "harvest_failed", e.to_string())),
        Err(e) => error_response(ApiError::new(500, "internal", e.to_string())),
    }
}

async fn healthz() -> &'static str {
    "ok"
}

pub fn router(coordinator: Arc<Coordinator>) -> Router {
    Router::new()
        .route("/search", get(search_get).post(search_post))
        .route("/status", get(status))
        .route("/admin/harvest", post(admin_harvest))
        .route("/healthz", get(healthz))
        .with_state(coordinator)
}
