//! Running axum routers on background tasks, and wiring a coordinator from a config.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::Router;
use superindex_core::cluster::{LocalReplica, Replica};
use superindex_core::harvest::{Clock, CursorStore, Scheduler, SystemClock};
use superindex_core::{Cluster, ClusterError, Harvester, IndexError};
use tokio::runtime::Handle;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::api::Coordinator;
use crate::config::{ServiceConfig, LOCAL_ENDPOINT};
use crate::replica::HttpReplica;
use crate::source::HttpSource;

/// A server task. Dropping the handle leaves the server running.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting, lets in-flight requests finish, and waits.
    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = self.task.await;
    }
}

/// Binds `addr` and serves `router` on the runtime behind `rt`.
pub fn spawn_server(rt: &Handle, addr: &str, router: Router) -> std::io::Result<ServerHandle> {
    let listener = rt.block_on(tokio::net::TcpListener::bind(addr))?;
    Ok(spawn_on_listener(rt, listener, router))
}

pub fn spawn_on_listener(rt: &Handle, listener: tokio::net::TcpListener, router: Router) -> ServerHandle {
    let addr = listener.local_addr().expect("bound listener has an address");
    let (tx, rx) = oneshot::channel::<()>();
    let task = rt.spawn(async move {
        let served = axum::serve(listener, router).with_graceful_shutdown(async {
            // A dropped handle is not a shutdown request.
            if rx.await.is_err() {
                std::future::pending::<()>().await;
            }
        });
        if let Err(e) = served.await {
            tracing::error!(%addr, error = %e, "server stopped");
        }
    });
    ServerHandle { addr, shutdown: Some(tx), task }
}

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error("opening replica {shard}/{slot}: {source}")]
    Replica { shard: usize, slot: usize, source: IndexError },
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("opening cursor store: {0}")]
    Cursors(std::io::Error),
}

/// A coordinator wired from a validated config, plus the in-process replicas it owns.
pub struct Assembly {
    pub coordinator: Arc<Coordinator>,
    pub local_replicas: Vec<Arc<LocalReplica>>,
}

/// Opens local replicas, connects remote ones, and registers every source.
///
/// Must be called outside an async context: remote replicas are probed with
/// blocking requests.
pub fn assemble(cfg: &ServiceConfig) -> Result<Assembly, BuildError> {
    let c = &cfg.cluster;
    let mut local_replicas = Vec::new();
    let mut grid: Vec<Vec<Arc<dyn Replica>>> = Vec::with_capacity(c.num_shards);
    for shard in 0..c.num_shards {
        let mut row: Vec<Arc<dyn Replica>> = Vec::with_capacity(c.replication_factor);
        for slot in 0..c.replication_factor {
            let endpoint = cfg.endpoint(shard, slot);
            if endpoint == LOCAL_ENDPOINT {
                let name = format!("local://shard{shard}/replica{slot}");
                let replica = LocalReplica::open(name, &cfg.replica_dir(shard, slot))
                    .map(Arc::new)
                    .map_err(|source| BuildError::Replica { shard, slot, source })?;
                local_replicas.push(replica.clone());
                row.push(replica);
            } else {
                row.push(Arc::new(HttpReplica::new(endpoint)));
            }
        }
        grid.push(row);
    }
    let cluster = Arc::new(Cluster::new(grid)?);
    let cursors = CursorStore::open(&cfg.cursor_dir()).map_err(BuildError::Cursors)?;
    let harvester = Arc::new(Harvester::new(cluster, cursors));
    let mut scheduler = Scheduler::new(harvester.clone(), cfg.reconcile_every_n_cycles);
    let now = SystemClock.now_ms();
    for src in &cfg.sources {
        scheduler.add_source(src.clone(), Arc::new(HttpSource::new(&src.base_url)), now);
    }
    Ok(Assembly { coordinator: Arc::new(Coordinator::new(harvester, Arc::new(scheduler))), local_replicas })
}
