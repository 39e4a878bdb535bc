//! Deterministic in-process federation: seeded corpora, scripted mutation
//! timelines and simulated source nodes that speak the harvest protocol.
//!
//! Nothing here reads the wall clock. A `(seed, script)` pair fixes every
//! response a node will ever give.

mod corpus;
mod node;
mod scenario;
mod script;

pub use corpus::{
    generate_corpus, EXPERIMENTS, FREQUENCIES, INSTITUTES, PROJECTS, SIM_YEAR_END_MS, SIM_YEAR_MS, SIM_YEAR_START_MS,
    VARIABLES,
};
pub use node::{FaultMode, SimNode, SimSource};
pub use scenario::{verify_convergence, ConvergenceReport, NodeSpec, RunSummary, Scenario, ScenarioError};
pub use script::{MutationScript, ScriptError, ScriptParams, ScriptStep, StepAction};
