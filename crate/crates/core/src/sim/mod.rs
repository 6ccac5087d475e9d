//! Deterministic discrete-event simulation of a disaster-area network.

pub mod log;
pub mod scenario;
pub mod world;

pub use log::{read_jsonl, summarize, write_jsonl, LogError, LogRecord, LogSummary};
pub use scenario::{
    random_geometric, AirdropSpec, AnchorSpec, NodeKind, NodeSpec, Scenario, ScenarioAction,
    ScenarioError, ScenarioEvent, ScenarioParams,
};
pub use world::{
    ControlStats, Delivery, Node, NodeInfo, SimParams, World, WorldError, WorldSnapshot,
    CONVERGENCE_TIME,
};

/// Parses scenario JSON and builds the world.
pub fn load_scenario(text: &str, seed: Option<u64>) -> Result<World, ScenarioError> {
    World::with_seed(&Scenario::parse(text)?, seed)
}
