//! Command-line driver: batch runs, node inspection, log replay and the
//! served mode with the station HTTP API.

pub mod api;
pub mod frames;

use std::fs;
use std::path::Path;
use std::time::Duration;

use anyhow::{Context, Result};
use lifeline_core::sim::{load_scenario, ScenarioAction};
use lifeline_core::{NodeId, SimTime, World};
use serde_json::{json, Value};

use crate::api::AppState;

pub fn load_world(path: &Path, seed: Option<u64>) -> Result<World> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    load_scenario(&text, seed).with_context(|| format!("loading scenario {}", path.display()))
}

/// Default run length: one minute past the last scheduled scenario event,
/// and at least two minutes.
pub fn default_until(path: &Path) -> Result<SimTime> {
    let text = fs::read_to_string(path)?;
    let sc = lifeline_core::Scenario::parse(&text)?;
    let last = sc
        .events
        .iter()
        .map(|e| e.at)
        .max()
        .unwrap_or(SimTime::ZERO);
    Ok((last + SimTime::from_secs(60)).max(SimTime::from_secs(120)))
}

/// JSON dump of one node's protocol state.
pub fn inspect_node(world: &World, id: &NodeId) -> Result<Value> {
    let n = world
        .node(id)
        .with_context(|| format!("unknown node {id}"))?;
    Ok(json!({
        "t": world.clock().as_secs_f64(),
        "node": id.as_str(),
        "kind": n.kind.as_str(),
        "addr": n.addr.to_string(),
        "mode": n.mode.to_string(),
        "battery": n.battery,
        "position": n.position,
        "olsr": n.olsr.dump(),
        "queues": n.pipeline.bank.occupancy(),
        "swapped": n.pipeline.store.swapped().len(),
        "archived": n.pipeline.store.archived().len(),
        "backup_log": n.backup_log.len(),
        "learned": n.locator.learned,
    }))
}

/// Advances the shared session in real time, `speed` simulated seconds per
/// wall-clock second, until `until` if given.
pub async fn drive(state: AppState, speed: f64, until: Option<SimTime>) {
    let tick = Duration::from_millis(50);
    let sim_tick = SimTime::from_secs_f64(tick.as_secs_f64() * speed.max(0.0));
    let mut interval = tokio::time::interval(tick);
    loop {
        interval.tick().await;
        let grew = {
            let mut s = state.session.lock().await;
            let before = s.world().log().len();
            let mut target = s.world().clock() + sim_tick;
            if let Some(u) = until {
                if s.world().clock() >= u {
                    return;
                }
                target = target.min(u);
            }
            s.run_until(target);
            s.world().log().len() > before
        };
        if grew {
            state.events.notify_waiters();
        }
    }
}

/// Parses a scenario action given as `{"action": ..., "args": {...}}`.
pub fn parse_action(text: &str) -> Result<ScenarioAction> {
    Ok(serde_json::from_str(text)?)
}
