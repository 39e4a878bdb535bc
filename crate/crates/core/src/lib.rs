//! Federated metadata super-index.
//!
//! Records harvested from many independent source nodes land in a single
//! sharded, replicated faceted index that answers every client query from one
//! place. The crate is organised bottom-up:
//!
//! - [`model`]: the record schema, validation, canonical bytes and digests.
//! - [`index`]: the single-shard inverted index each replica runs.
//! - [`cluster`]: routing, replication with catch-up, and scatter-gather reads.
//! - [`harvest`]: full harvest, incremental sync, reconciliation, scheduling.
//! - [`sim`]: a deterministic in-process federation used to drive all of the above.

pub mod cluster;
pub mod harvest;
pub mod index;
pub mod model;
pub mod sim;

pub use cluster::{Cluster, ClusterError, ClusterState, LocalReplica, Replica, ReplicaState};
pub use harvest::{HarvestCursor, HarvestError, Harvester, SourceClient, SourceNodeConfig};
pub use index::{CommitPoint, Index, IndexError, QuerySpec, SearchResult};
pub use model::{ContentDigest, MetadataRecord, ModelError, RecordKey, RecordType};
