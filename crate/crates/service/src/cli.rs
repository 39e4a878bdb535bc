//! The `superindex` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use superindex_core::cluster::LocalReplica;
use superindex_core::harvest::SystemClock;
use superindex_core::sim::Scenario;

use crate::api::router;
use crate::check::run_check;
use crate::config::{http_authority, ConfigError, ServiceConfig};
use crate::replica::{http_agent, replica_router};
use crate::server::{assemble, spawn_server};
use crate::sim::sim_router;

/// How often `serve` checkpoints every replica.
const CHECKPOINT_EVERY: Duration = Duration::from_secs(600);

#[derive(Parser, Debug)]
#[command(name = "superindex", version, about = "Federated metadata search index", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the coordinator: search API, in-process replicas and the harvest loop.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one replica of one shard as an HTTP server.
    Replica {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        shard: usize,
        #[arg(long)]
        slot: usize,
    },
    /// Ask a running coordinator to harvest one source now.
    Harvest {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        source: String,
        /// Full harvest instead of an incremental sync.
        #[arg(long)]
        full: bool,
    },
    /// Print a running coordinator's status.
    Status {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve the simulated source nodes of a scenario over HTTP.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// First port; node k listens on port + k. 0 picks free ports.
        #[arg(long, default_value_t = 0)]
        port: u16,
    },
    /// Harvest a scenario and verify the index equals the union of its sources.
    Check {
        #[arg(long)]
        scenario: PathBuf,
        /// Persist the build here; if it already holds a finished build, only verify it.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

/// A failed command; everything here maps to exit code 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("error[{}]: {}", .0.code(), .0)]
    Config(#[from] ConfigError),
    #[error("error: {0}")]
    Failed(String),
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

fn load_config(flag: Option<&Path>) -> Result<ServiceConfig, CliError> {
    let path = ServiceConfig::locate(flag)?;
    let cfg = ServiceConfig::load(&path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(failed)
}

fn wait_for_ctrl_c(rt: &tokio::runtime::Runtime) {
    if let Err(e) = rt.block_on(tokio::signal::ctrl_c()) {
        tracing::error!(error = %e, "cannot listen for shutdown signal");
    }
}

fn serve(flag: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(flag)?;
    cfg.prepare_data_dir()?;
    let rt = runtime()?;
    let assembly = assemble(&cfg).map_err(failed)?;
    let coordinator = assembly.coordinator;
    let addr = format!("{}:{}", cfg.http.bind, cfg.http.port);
    let server = spawn_server(rt.handle(), &addr, router(coordinator.clone())).map_err(failed)?;
    tracing::info!(addr = %server.addr, "coordinator listening");

    let stop = Arc::new(AtomicBool::new(false));
    let scheduler = coordinator.scheduler.clone();
    let harvest_loop = {
        let stop = stop.clone();
        std::thread::spawn(move || scheduler.run(&SystemClock, &stop))
    };
    let health_loop = {
        let stop = stop.clone();
        let cluster = coordinator.cluster.clone();
        let interval = Duration::from_millis(cfg.health_check_interval_ms);
        std::thread::spawn(move || {
            let mut last_checkpoint = Instant::now();
            while !stop.load(Ordering::SeqCst) {
                let wake = Instant::now() + interval;
                while Instant::now() < wake && !stop.load(Ordering::SeqCst) {
                    std::thread::sleep(Duration::from_millis(50).min(interval));
                }
                cluster.check_health();
                if last_checkpoint.elapsed() >= CHECKPOINT_EVERY {
                    if let Err(e) = cluster.checkpoint() {
                        tracing::warn!(error = %e, "periodic checkpoint failed");
                    }
                    last_checkpoint = Instant::now();
                }
            }
        })
    };

    wait_for_ctrl_c(&rt);
    tracing::info!("shutting down");
    stop.store(true, Ordering::SeqCst);
    rt.block_on(server.shutdown());
    let _ = harvest_loop.join();
    let _ = health_loop.join();
    coordinator.cluster.checkpoint().map_err(failed)
}

fn replica(flag: Option<&Path>, shard: usize, slot: usize) -> Result<(), CliError> {
    let cfg = load_config(flag)?;
    let c = &cfg.cluster;
    if shard >= c.num_shards || slot >= c.replication_factor {
        return Err(failed(format!(
            "no replica {shard}/{slot} in a {}x{} cluster",
            c.num_shards, c.replication_factor
        )));
    }
    let endpoint = cfg.endpoint(shard, slot);
    let authority = http_authority(endpoint)
        .ok_or_else(|| failed(format!("replica {shard}/{slot} is configured as {endpoint:?}, not an HTTP endpoint")))?;
    cfg.prepare_data_dir()?;
    let local = Arc::new(LocalReplica::open(endpoint, &cfg.replica_dir(shard, slot)).map_err(failed)?);
    let rt = runtime()?;
    let server = spawn_server(rt.handle(), authority, replica_router(local.clone())).map_err(failed)?;
    tracing::info!(addr = %server.addr, shard, slot, "replica listening");
    wait_for_ctrl_c(&rt);
    rt.block_on(server.shutdown());
    local.index().checkpoint().map_err(failed)
}

fn print_reply(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<(), CliError> {
    let mut resp = resp.map_err(|e| failed(format!("coordinator unreachable: {e}")))?;
    let status = resp.status().as_u16();
    let body = resp.body_mut().read_to_string().map_err(failed)?;
    let pretty = serde_json::from_str::<Value>(&body)
        .map(|v| serde_json::to_string_pretty(&v).expect("plain JSON"))
        .unwrap_or(body);
    if status == 200 {
        println!("{pretty}");
        Ok(())
    } else {
        Err(failed(format!("coordinator answered {status}: {pretty}")))
    }
}

fn harvest(flag: Option<&Path>, source: &str, full: bool) -> Result<(), CliError> {
    let cfg = load_config(flag)?;
    let url = format!("{}/admin/harvest", cfg.coordinator_url());
    print_reply(http_agent(Duration::from_secs(3600)).post(&url).send_json(json!({"source_id": source, "full": full})))
}

fn status(flag: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(flag)?;
    let url = format!("{}/status", cfg.coordinator_url());
    print_reply(http_agent(Duration::from_secs(60)).get(&url).call())
}

fn simulate(path: &Path, bind: &str, port: u16) -> Result<(), CliError> {
    let scenario = Scenario::load(path).map_err(failed)?;
    let rt = runtime()?;
    let mut servers = Vec::new();
    let mut urls = serde_json::Map::new();
    for (k, source) in scenario.build_sources().into_iter().enumerate() {
        let node_port =
            if port == 0 { 0 } else { port.checked_add(k as u16).ok_or_else(|| failed("port overflow"))? };
        let id = source.source_id();
        let server = spawn_server(rt.handle(), &format!("{bind}:{node_port}"), sim_router(source)).map_err(failed)?;
        urls.insert(id, json!(server.url()));
        servers.push(server);
    }
    println!("{}", Value::Object(urls));
    wait_for_ctrl_c(&rt);
    for s in servers {
        rt.block_on(s.shutdown());
    }
    Ok(())
}

fn check(path: &Path, data_dir: Option<&Path>) -> Result<bool, CliError> {
    let scenario = Scenario::load(path).map_err(failed)?;
    let outcome = run_check(&scenario, data_dir).map_err(failed)?;
    println!("{}", serde_json::to_string_pretty(&outcome).expect("plain JSON"));
    let converged = outcome.report.converged();
    if !converged {
        eprintln!("check: super-index differs from the union of the scenario sources");
    }
    Ok(converged)
}

/// Parses `args` and runs the command: 0 on success, 1 on operational failure
/// (including a failed `check`), 2 on usage errors.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let outcome = match &cli.command {
        Command::Serve { config } => serve(config.as_deref()),
        Command::Replica { config, shard, slot } => replica(config.as_deref(), *shard, *slot),
        Command::Harvest { config, source, full } => harvest(config.as_deref(), source, *full),
        Command::Status { config } => status(config.as_deref()),
        Command::Simulate { scenario, bind, port } => simulate(scenario, bind, *port),
        Command::Check { scenario, data_dir } => match check(scenario, data_dir.as_deref()) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}
