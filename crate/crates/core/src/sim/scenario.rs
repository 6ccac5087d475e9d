//! Scenario files: node declarations, timed events and parameter overrides.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backup::BackupRule;
use crate::ids::{NodeId, SimAddress, SimTime};
use crate::locator::AnchorSource;

use super::world::SimParams;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{path}: {message}")]
pub struct ScenarioError {
    pub path: String,
    pub message: String,
}

impl ScenarioError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        ScenarioError {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Phone,
    Router,
    Station,
}

impl NodeKind {
    /// Phones reach about 100 m; routers and stations farther.
    pub fn default_range(self) -> f64 {
        match self {
            NodeKind::Phone => 100.0,
            NodeKind::Router | NodeKind::Station => 250.0,
        }
    }

    /// Battery drain in percent per hour when off mains power.
    pub fn default_drain(self) -> f64 {
        match self {
            NodeKind::Phone => 100.0 / 24.0,
            NodeKind::Router => 5.0,
            NodeKind::Station => 2.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Phone => "phone",
            NodeKind::Router => "router",
            NodeKind::Station => "station",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    pub x: f64,
    pub y: f64,
    #[serde(default = "preinstalled")]
    pub source: AnchorSource,
}

fn preinstalled() -> AnchorSource {
    AnchorSource::Preinstalled
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    pub kind: NodeKind,
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<f64>,
    #[serde(default = "full")]
    pub battery: f64,
    #[serde(default)]
    pub ac_powered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<AnchorSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub backup_rules: Vec<BackupRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub addr: Option<SimAddress>,
    /// Personal information attached to this phone's SOS messages.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub info: String,
    /// Station this phone reports to; defaults to the first station.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub station: Option<NodeId>,
    /// Percent per hour while off mains power.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drain: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<crate::boot::NodeMode>,
}

fn full() -> f64 {
    100.0
}

impl NodeSpec {
    pub fn new(id: &str, kind: NodeKind, x: f64, y: f64) -> Self {
        NodeSpec {
            id: NodeId::new(id).expect("valid node id"),
            kind,
            x,
            y,
            range: None,
            battery: 100.0,
            ac_powered: false,
            anchor: None,
            backup_rules: Vec::new(),
            addr: None,
            info: String::new(),
            station: None,
            drain: None,
            mode: None,
        }
    }

    pub fn with_anchor(mut self, x: f64, y: f64) -> Self {
        self.anchor = Some(AnchorSpec {
            x,
            y,
            source: AnchorSource::Preinstalled,
        });
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AirdropSpec {
    pub id: NodeId,
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<f64>,
    #[serde(default = "full")]
    pub battery: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<AnchorSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub backup_rules: Vec<BackupRule>,
}

impl AirdropSpec {
    pub fn to_node_spec(&self) -> NodeSpec {
        let mut n = NodeSpec::new(self.id.as_str(), NodeKind::Router, self.x, self.y);
        n.range = self.range;
        n.battery = self.battery;
        n.anchor = self.anchor.or(Some(AnchorSpec {
            x: self.x,
            y: self.y,
            source: AnchorSource::RescuerDeployed,
        }));
        n.backup_rules = self.backup_rules.clone();
        n.mode = Some(crate::boot::NodeMode::Emergency);
        n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", content = "args")]
pub enum ScenarioAction {
    KillNode {
        node: NodeId,
    },
    CutACPower {
        node: NodeId,
    },
    RestorePower {
        node: NodeId,
    },
    MoveNode {
        node: NodeId,
        x: f64,
        y: f64,
    },
    AirdropRouter(AirdropSpec),
    SendSOS {
        from: NodeId,
        #[serde(default)]
        priority: u8,
        #[serde(default)]
        body: String,
        /// Base64 photo attachment.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        photo: Option<String>,
        /// Destination station; the phone's configured one by default.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        to: Option<NodeId>,
    },
    /// Percent per hour while off mains power.
    DrainBattery {
        node: NodeId,
        rate: f64,
    },
    PartialCrash {
        nodes: Vec<NodeId>,
    },
    /// Clears volatile state; the backup log survives and is replayed.
    RebootNode {
        node: NodeId,
    },
    WhereAmI {
        from: NodeId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_hops: Option<u32>,
    },
    StationReply {
        victim: NodeId,
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        station: Option<NodeId>,
    },
}

impl ScenarioAction {
    /// Node ids this action refers to (excluding the one it creates).
    pub fn referenced(&self) -> Vec<&NodeId> {
        match self {
            ScenarioAction::KillNode { node }
            | ScenarioAction::CutACPower { node }
            | ScenarioAction::RestorePower { node }
            | ScenarioAction::MoveNode { node, .. }
            | ScenarioAction::DrainBattery { node, .. }
            | ScenarioAction::RebootNode { node } => vec![node],
            ScenarioAction::AirdropRouter(_) => vec![],
            ScenarioAction::SendSOS { from, to, .. } => {
                let mut v = vec![from];
                v.extend(to.iter());
                v
            }
            ScenarioAction::WhereAmI { from, .. } => vec![from],
            ScenarioAction::PartialCrash { nodes } => nodes.iter().collect(),
            ScenarioAction::StationReply {
                victim, station, ..
            } => {
                let mut v = vec![victim];
                v.extend(station.iter());
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    #[serde(with = "seconds")]
    pub at: SimTime,
    #[serde(flatten)]
    pub action: ScenarioAction,
}

/// Overrides for simulation parameters. Durations are in seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioParams {
    pub seed: Option<u64>,
    pub hello_interval: Option<f64>,
    pub tc_interval: Option<f64>,
    pub neighb_hold: Option<f64>,
    pub top_hold: Option<f64>,
    pub tc_ttl: Option<u8>,
    pub dup_window: Option<usize>,
    pub link_latency: Option<f64>,
    pub service_time: Option<f64>,
    pub fwd_per_tick: Option<usize>,
    pub swap_limit: Option<u32>,
    pub swap_in_batch: Option<usize>,
    pub cascade_every: Option<u32>,
    pub queue_capacity: Option<usize>,
    pub swap_retry: Option<f64>,
    pub battery_check_interval: Option<f64>,
    pub scan_interval: Option<f64>,
    pub consumption_threshold: Option<f64>,
    pub battery_noise: Option<f64>,
    pub charge_per_hour: Option<f64>,
    pub n_hops: Option<u32>,
    pub query_timeout: Option<f64>,
    pub dedup_window: Option<f64>,
    pub loss_rate: Option<f64>,
    pub backup_capacity: Option<usize>,
    pub handoff_battery: Option<f64>,
    pub log_control: Option<bool>,
}

impl ScenarioParams {
    pub fn apply(&self, p: &mut SimParams) -> Result<(), ScenarioError> {
        let secs = |name: &str, v: f64| -> Result<SimTime, ScenarioError> {
            if v.is_finite() && v >= 0.0 {
                Ok(SimTime::from_secs_f64(v))
            } else {
                Err(ScenarioError::new(
                    format!("params.{name}"),
                    "must be a non-negative number of seconds",
                ))
            }
        };
        macro_rules! time {
            ($field:ident => $target:expr) => {
                if let Some(v) = self.$field {
                    $target = secs(stringify!($field), v)?;
                }
            };
        }
        macro_rules! plain {
            ($field:ident => $target:expr) => {
                if let Some(v) = self.$field {
                    $target = v;
                }
            };
        }
        plain!(seed => p.seed);
        time!(hello_interval => p.olsr.hello_interval);
        time!(tc_interval => p.olsr.tc_interval);
        time!(neighb_hold => p.olsr.neighb_hold);
        time!(top_hold => p.olsr.top_hold);
        plain!(tc_ttl => p.olsr.tc_ttl);
        plain!(dup_window => p.olsr.dup_window);
        time!(link_latency => p.link_latency);
        time!(service_time => p.service_time);
        plain!(fwd_per_tick => p.fwd_per_tick);
        plain!(swap_limit => p.pipeline.swap_limit);
        plain!(swap_in_batch => p.pipeline.swap_in_batch);
        plain!(cascade_every => p.pipeline.cascade_every);
        plain!(queue_capacity => p.pipeline.capacity);
        time!(swap_retry => p.swap_retry);
        time!(battery_check_interval => p.boot.battery_check_interval);
        time!(scan_interval => p.boot.scan_interval);
        plain!(consumption_threshold => p.boot.consumption_threshold);
        plain!(battery_noise => p.battery_noise);
        plain!(charge_per_hour => p.charge_per_hour);
        plain!(n_hops => p.locator.n_hops);
        time!(query_timeout => p.locator.query_timeout);
        time!(dedup_window => p.locator.dedup_window);
        plain!(loss_rate => p.loss_rate);
        plain!(backup_capacity => p.backup_capacity);
        plain!(handoff_battery => p.handoff_battery_pct);
        plain!(log_control => p.log_control);

        if p.olsr.hello_interval == SimTime::ZERO || p.olsr.tc_interval == SimTime::ZERO {
            return Err(ScenarioError::new(
                "params",
                "protocol intervals must be positive",
            ));
        }
        if p.boot.battery_check_interval == SimTime::ZERO || p.boot.scan_interval == SimTime::ZERO {
            return Err(ScenarioError::new(
                "params",
                "boot intervals must be positive",
            ));
        }
        if p.service_time == SimTime::ZERO || p.swap_retry == SimTime::ZERO {
            return Err(ScenarioError::new(
                "params",
                "service_time and swap_retry must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&p.loss_rate) {
            return Err(ScenarioError::new("params.loss_rate", "must lie in [0, 1]"));
        }
        if p.fwd_per_tick == 0 || p.pipeline.cascade_every == 0 {
            return Err(ScenarioError::new(
                "params",
                "fwd_per_tick and cascade_every must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub params: ScenarioParams,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
}

mod seconds {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::ids::SimTime;

    pub fn serialize<S: Serializer>(t: &SimTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(t.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SimTime, D::Error> {
        let v = f64::deserialize(d)?;
        if v.is_finite() && v >= 0.0 {
            Ok(SimTime::from_secs_f64(v))
        } else {
            Err(serde::de::Error::custom(
                "time must be a non-negative number of seconds",
            ))
        }
    }
}

fn at_path<T: serde::de::DeserializeOwned>(v: Value, path: &str) -> Result<T, ScenarioError> {
    serde_json::from_value(v).map_err(|e| ScenarioError::new(path, e.to_string()))
}

impl Scenario {
    /// Parses scenario JSON. Errors name the offending path, such as
    /// `nodes[3]` or `events[0].args`.
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let root: Value =
            serde_json::from_str(text).map_err(|e| ScenarioError::new("$", e.to_string()))?;
        let Value::Object(mut obj) = root else {
            return Err(ScenarioError::new("$", "scenario must be a JSON object"));
        };
        let name = match obj.remove("name") {
            Some(v) => at_path(v, "name")?,
            None => String::new(),
        };
        let params = match obj.remove("params") {
            Some(v) => at_path(v, "params")?,
            None => ScenarioParams::default(),
        };
        let nodes = match obj.remove("nodes") {
            Some(Value::Array(items)) => items
                .into_iter()
                .enumerate()
                .map(|(i, v)| at_path(v, &format!("nodes[{i}]")))
                .collect::<Result<Vec<NodeSpec>, _>>()?,
            Some(_) => return Err(ScenarioError::new("nodes", "must be an array")),
            None => return Err(ScenarioError::new("nodes", "missing")),
        };
        let events = match obj.remove("events") {
            Some(Value::Array(items)) => items
                .into_iter()
                .enumerate()
                .map(|(i, v)| parse_event(v, &format!("events[{i}]")))
                .collect::<Result<Vec<_>, _>>()?,
            Some(_) => return Err(ScenarioError::new("events", "must be an array")),
            None => Vec::new(),
        };
        if let Some(k) = obj.keys().next() {
            return Err(ScenarioError::new(k.as_str(), "unknown top-level field"));
        }
        Ok(Scenario {
            name,
            params,
            nodes,
            events,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Ids declared up front or created by an airdrop event.
    pub fn all_ids(&self) -> BTreeSet<NodeId> {
        let mut ids: BTreeSet<NodeId> = self.nodes.iter().map(|n| n.id.clone()).collect();
        for e in &self.events {
            if let ScenarioAction::AirdropRouter(a) = &e.action {
                ids.insert(a.id.clone());
            }
        }
        ids
    }
}

fn parse_event(v: Value, path: &str) -> Result<ScenarioEvent, ScenarioError> {
    let Value::Object(mut obj) = v else {
        return Err(ScenarioError::new(path, "event must be an object"));
    };
    let at = match obj.remove("at") {
        Some(Value::Number(n)) => n
            .as_f64()
            .filter(|t| t.is_finite() && *t >= 0.0)
            .ok_or_else(|| {
                ScenarioError::new(format!("{path}.at"), "must be a non-negative number")
            })?,
        _ => {
            return Err(ScenarioError::new(
                format!("{path}.at"),
                "missing or not a number",
            ))
        }
    };
    let action_name = obj
        .get("action")
        .and_then(Value::as_str)
        .ok_or_else(|| ScenarioError::new(format!("{path}.action"), "missing or not a string"))?
        .to_string();
    let action: ScenarioAction = serde_json::from_value(Value::Object(obj))
        .map_err(|e| ScenarioError::new(format!("{path}.args"), format!("{action_name}: {e}")))?;
    Ok(ScenarioEvent {
        at: SimTime::from_secs_f64(at),
        action,
    })
}

/// Random geometric deployment of `n` routers in a square of side `side`,
/// optionally re-drawn until connected under `range`.
pub fn random_geometric(seed: u64, n: usize, side: f64, range: f64, connected: bool) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(0.0..side), rng.random_range(0.0..side)))
            .collect();
        if connected && !points_connected(&pts, range) {
            continue;
        }
        let nodes = pts
            .iter()
            .enumerate()
            .map(|(i, (x, y))| {
                let mut s = NodeSpec::new(&format!("R-{i:02}"), NodeKind::Router, *x, *y);
                s.range = Some(range);
                s
            })
            .collect();
        return Scenario {
            name: format!("rgg-{seed}-{n}"),
            params: ScenarioParams {
                seed: Some(seed),
                ..Default::default()
            },
            nodes,
            events: Vec::new(),
        };
    }
}

fn points_connected(pts: &[(f64, f64)], range: f64) -> bool {
    if pts.is_empty() {
        return true;
    }
    let mut seen = vec![false; pts.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..pts.len() {
            let d = (pts[i].0 - pts[j].0).hypot(pts[i].1 - pts[j].1);
            if !seen[j] && d <= range {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal() {
        let s = Scenario::parse(
            r#"{"nodes":[{"id":"P-1","kind":"phone","x":0,"y":0},{"id":"ST-1","kind":"station","x":50,"y":0}]}"#,
        )
        .unwrap();
        assert_eq!(s.nodes.len(), 2);
        assert_eq!(s.nodes[0].battery, 100.0);
    }

    #[test]
    fn errors_name_the_path() {
        let e = Scenario::parse(
            r#"{"nodes":[{"id":"P-1","kind":"phone","x":0,"y":0},{"id":"R-1","x":0,"y":0}]}"#,
        )
        .unwrap_err();
        assert_eq!(e.path, "nodes[1]");
        assert!(e.message.contains("kind"), "{e}");

        let e = Scenario::parse(
            r#"{"nodes":[],"events":[{"at":1,"action":"KillNode","args":{"nod":"R-1"}}]}"#,
        )
        .unwrap_err();
        assert_eq!(e.path, "events[0].args");

        let e = Scenario::parse(
            r#"{"nodes":[],"events":[{"action":"KillNode","args":{"node":"R-1"}}]}"#,
        )
        .unwrap_err();
        assert_eq!(e.path, "events[0].at");

        let e = Scenario::parse(r#"{"nodes":[], "bogus": 1}"#).unwrap_err();
        assert_eq!(e.path, "bogus");

        let e = Scenario::parse(r#"{"nodes":[], "params": {"helo_interval": 1}}"#).unwrap_err();
        assert_eq!(e.path, "params");
    }

    #[test]
    fn backup_rule_range_checked_at_load() {
        let e = Scenario::parse(
            r#"{"nodes":[{"id":"R-1","kind":"router","x":0,"y":0,"backup_rules":[{"option":3,"param":0}]}]}"#,
        )
        .unwrap_err();
        assert_eq!(e.path, "nodes[0]");
    }

    #[test]
    fn events_round_trip_through_json() {
        let text = r#"{"nodes":[],"events":[
            {"at":1.5,"action":"SendSOS","args":{"from":"P-1","priority":2,"body":"help"}},
            {"at":3,"action":"AirdropRouter","args":{"id":"R-9","x":1,"y":2}},
            {"at":4,"action":"PartialCrash","args":{"nodes":["R-1","R-2"]}}
        ]}"#;
        let s = Scenario::parse(text).unwrap();
        assert_eq!(s.events[0].at, SimTime::from_millis(1500));
        let again = Scenario::parse(&s.to_json()).unwrap();
        assert_eq!(again, s);
        assert!(s.all_ids().contains(&NodeId::new("R-9").unwrap()));
    }

    #[test]
    fn random_geometric_is_seeded_and_connected() {
        let a = random_geometric(3, 15, 800.0, 250.0, true);
        let b = random_geometric(3, 15, 800.0, 250.0, true);
        assert_eq!(a, b);
        let pts: Vec<_> = a.nodes.iter().map(|n| (n.x, n.y)).collect();
        assert!(points_connected(&pts, 250.0));
    }
}
