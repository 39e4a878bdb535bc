//! Replica RPC over HTTP: the server side that wraps a local index, and
//! [`HttpReplica`], the coordinator's client.
//!
//! | method | path | body / params | reply |
//! |---|---|---|---|
//! | POST | /replica/apply | one log entry or an array | `{"watermark"}` |
//! | GET | /replica/log | `from_seq`, `limit` | array of entries |
//! | GET | /replica/snapshot | | snapshot file bytes |
//! | POST | /replica/install | snapshot file bytes | `{"seq"}` |
//! | GET, POST | /replica/search | query params or QuerySpec JSON | search result |
//! | GET | /replica/health | | `{"state","watermark"}` |
//! | POST | /replica/lookup | array of keys | array of documents |
//! | GET | /replica/inventory | optional `source_node` | array of items |
//! | POST | /replica/checkpoint | | `{"seq"}` |

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use superindex_core::cluster::{InventoryItem, LocalReplica, Replica, ReplicaError, ReplicaHealth};
use superindex_core::index::{LogEntry, QuerySpec, SearchResult, SnapshotImage};
use superindex_core::{MetadataRecord, RecordKey};

use crate::params::{parse_search_request, ApiError};

// ---- server ----

fn replica_error(e: ReplicaError) -> Response {
    let (status, body) = match &e {
        ReplicaError::SeqGap { expected, got } => {
            (StatusCode::CONFLICT, json!({"error": "seq_gap", "expected": expected, "got": got}))
        }
        ReplicaError::Unreachable(_) => (StatusCode::SERVICE_UNAVAILABLE, json!({"error": "unavailable"})),
        ReplicaError::Rejected(msg) => (StatusCode::UNPROCESSABLE_ENTITY, json!({"error": "rejected", "message": msg})),
    };
    (status, Json(body)).into_response()
}

fn api_error(e: ApiError) -> Response {
    let status = StatusCode::from_u16(e.status).unwrap_or(StatusCode::BAD_REQUEST);
    (status, [("content-type", "application/json")], e.body()).into_response()
}

async fn blocking<T: Send + 'static>(
    replica: Arc<LocalReplica>,
    f: impl FnOnce(&LocalReplica) -> Result<T, ReplicaError> + Send + 'static,
) -> Result<T, Response> {
    tokio::task::spawn_blocking(move || f(&replica))
        .await
        .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response())?
        .map_err(replica_error)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    Many(Vec<LogEntry>),
    One(LogEntry),
}

async fn apply(State(r): State<Arc<LocalReplica>>, Json(body): Json<OneOrMany>) -> Response {
    let entries = match body {
        OneOrMany::Many(v) => v,
        OneOrMany::One(e) => vec![e],
    };
    match blocking(r, move |r| r.apply(&entries)).await {
        Ok(watermark) => Json(json!({"watermark": watermark})).into_response(),
        Err(resp) => resp,
    }
}

#[derive(Deserialize)]
struct LogParams {
    from_seq: u64,
    #[serde(default = "default_log_limit")]
    limit: usize,
}

fn default_log_limit() -> usize {
    1000
}

async fn log(State(r): State<Arc<LocalReplica>>, Query(p): Query<LogParams>) -> Response {
    match blocking(r, move |r| r.log(p.from_seq, p.limit)).await {
        Ok(entries) => Json(entries).into_response(),
        Err(resp) => resp,
    }
}

async fn snapshot(State(r): State<Arc<LocalReplica>>) -> Response {
    match blocking(r, |r| r.snapshot()).await {
        Ok(image) => ([("content-type", "application/json")], image.to_bytes()).into_response(),
        Err(resp) => resp,
    }
}

async fn install(State(r): State<Arc<LocalReplica>>, body: Bytes) -> Response {
    let image = match SnapshotImage::from_bytes(&body) {
        Ok(image) => image,
        Err(e) => return api_error(ApiError::bad_request("bad_snapshot", e.to_string())),
    };
    let seq = image.seq;
    match blocking(r, move |r| r.install(image)).await {
        Ok(()) => Json(json!({"seq": seq})).into_response(),
        Err(resp) => resp,
    }
}

async fn run_search(r: Arc<LocalReplica>, q: QuerySpec) -> Response {
    match blocking(r, move |r| r.search(&q)).await {
        Ok(result) => Json(result).into_response(),
        Err(resp) => resp,
    }
}

async fn search_get(State(r): State<Arc<LocalReplica>>, Query(params): Query<Vec<(String, String)>>) -> Response {
    match parse_search_request(&params) {
        Ok(q) => run_search(r, q).await,
        Err(e) => api_error(e),
    }
}

async fn search_post(State(r): State<Arc<LocalReplica>>, Json(q): Json<QuerySpec>) -> Response {
    run_search(r, q).await
}

async fn health(State(r): State<Arc<LocalReplica>>) -> Response {
    match blocking(r, |r| r.health()).await {
        Ok(h) => Json(h).into_response(),
        Err(resp) => resp,
    }
}

async fn lookup(State(r): State<Arc<LocalReplica>>, Json(keys): Json<Vec<RecordKey>>) -> Response {
    match blocking(r, move |r| r.lookup(&keys)).await {
        Ok(docs) => Json(docs).into_response(),
        Err(resp) => resp,
    }
}

#[derive(Deserialize)]
struct InventoryParams {
    source_node: Option<String>,
}

async fn inventory(State(r): State<Arc<LocalReplica>>, Query(p): Query<InventoryParams>) -> Response {
    match blocking(r, move |r| r.inventory(p.source_node.as_deref())).await {
        Ok(items) => Json(items).into_response(),
        Err(resp) => resp,
    }
}

async fn checkpoint(State(r): State<Arc<LocalReplica>>) -> Response {
    match blocking(r, |r| r.checkpoint().map(|()| r.index().last_seq())).await {
        Ok(seq) => Json(json!({"seq": seq})).into_response(),
        Err(resp) => resp,
    }
}

/// Routes for one replica process.
pub fn replica_router(replica: Arc<LocalReplica>) -> Router {
    Router::new()
        .route("/replica/apply", post(apply))
        .route("/replica/log", get(log))
        .route("/replica/snapshot", get(snapshot))
        .route("/replica/install", post(install))
        .route("/replica/search", get(search_get).post(search_post))
        .route("/replica/health", get(health))
        .route("/replica/lookup", post(lookup))
        .route("/replica/inventory", get(inventory))
        .route("/replica/checkpoint", post(checkpoint))
        .with_state(replica)
}

// ---- client ----

/// Transport settings shared by the HTTP clients.
pub fn http_agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .timeout_connect(Some(Duration::from_secs(2)))
        .http_status_as_error(false)
        .build()
        .into()
}

/// A replica reached over HTTP.
pub struct HttpReplica {
    endpoint: String,
    base: String,
    agent: ureq::Agent,
}

impl HttpReplica {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self::with_timeout(endpoint, Duration::from_secs(30))
    }

    pub fn with_timeout(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let endpoint = endpoint.into();
        let base = endpoint.trim_end_matches('/').to_string();
        Self { endpoint, base, agent: http_agent(timeout) }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn unreachable(&self, e: impl std::fmt::Display) -> ReplicaError {
        ReplicaError::Unreachable(format!("{}: {e}", self.endpoint))
    }

    /// Turns a response into `T`, mapping error statuses onto [`ReplicaError`].
    fn decode<T: DeserializeOwned>(
        &self,
        resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<T, ReplicaError> {
        let mut resp = resp.map_err(|e| self.unreachable(e))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().with_config().limit(u64::MAX).read_to_vec().map_err(|e| self.unreachable(e))?;
        if status == 200 {
            return serde_json::from_slice(&body).map_err(|e| ReplicaError::Rejected(format!("bad reply: {e}")));
        }
        let detail: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
        match (status, detail["error"].as_str()) {
            (409, Some("seq_gap")) => Err(ReplicaError::SeqGap {
                expected: detail["expected"].as_u64().unwrap_or(0),
                got: detail["got"].as_u64().unwrap_or(0),
            }),
            (502..=504, _) => Err(self.unreachable(format!("status {status}"))),
            _ => Err(ReplicaError::Rejected(format!("status {status}: {}", String::from_utf8_lossy(&body)))),
        }
    }

    fn get_json<T: DeserializeOwned>(&self, path: &str, query: &[(&str, String)]) -> Result<T, ReplicaError> {
        let mut req = self.agent.get(&self.url(path));
        for (k, v) in query {
            req = req.query(*k, v);
        }
        self.decode(req.call())
    }

    fn post_json<T: DeserializeOwned>(&self, path: &str, body: &impl serde::Serialize) -> Result<T, ReplicaError> {
        self.decode(self.agent.post(&self.url(path)).send_json(body))
    }
}

#[derive(Deserialize)]
struct Watermark {
    watermark: u64,
}

impl Replica for HttpReplica {
    fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn apply(&self, entries: &[LogEntry]) -> Result<u64, ReplicaError> {
        self.post_json::<Watermark>("/replica/apply", &entries).map(|w| w.watermark)
    }

    fn log(&self, from_seq: u64, limit: usize) -> Result<Vec<LogEntry>, ReplicaError> {
        self.get_json("/replica/log", &[("from_seq", from_seq.to_string()), ("limit", limit.to_string())])
    }

    fn snapshot(&self) -> Result<SnapshotImage, ReplicaError> {
        let mut resp = self.agent.get(&self.url("/replica/snapshot")).call().map_err(|e| self.unreachable(e))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().with_config().limit(u64::MAX).read_to_vec().map_err(|e| self.unreachable(e))?;
        if status != 200 {
            return Err(self.unreachable(format!("status {status}")));
        }
        SnapshotImage::from_bytes(&body).map_err(|e| ReplicaError::Rejected(e.to_string()))
    }

    fn install(&self, image: SnapshotImage) -> Result<(), ReplicaError> {
        let resp = self
            .agent
            .post(&self.url("/replica/install"))
            .header("content-type", "application/json")
            .send(&image.to_bytes()[..]);
        self.decode::<Value>(resp).map(drop)
    }

    fn search(&self, q: &QuerySpec) -> Result<SearchResult, ReplicaError> {
        self.post_json("/replica/search", q)
    }

    fn health(&self) -> Result<ReplicaHealth, ReplicaError> {
        self.get_json("/replica/health", &[])
    }

    fn lookup(&self, keys: &[RecordKey]) -> Result<Vec<MetadataRecord>, ReplicaError> {
        self.post_json("/replica/lookup", &keys)
    }

    fn inventory(&self, source_node: Option<&str>) -> Result<Vec<InventoryItem>, ReplicaError> {
        let query: Vec<(&str, String)> = source_node.map(|s| ("source_node", s.to_string())).into_iter().collect();
        self.get_json("/replica/inventory", &query)
    }

    fn checkpoint(&self) -> Result<(), ReplicaError> {
        self.post_json::<Value>("/replica/checkpoint", &json!({})).map(drop)
    }
}
