//! Service layer for the federated metadata index: the coordinator's search
//! and status API, replica servers and their HTTP client, an HTTP harvest
//! client, simulated source servers, configuration and the CLI.

pub mod api;
pub mod check;
pub mod cli;
pub mod config;
pub mod params;
pub mod replica;
pub mod server;
pub mod sim;
pub mod source;

pub use api::{router, Coordinator};
pub use config::{ConfigError, ServiceConfig};
pub use params::{parse_search_request, render_search, ApiError};
pub use replica::{replica_router, HttpReplica};
pub use server::{assemble, spawn_server, ServerHandle};
pub use source::HttpSource;
