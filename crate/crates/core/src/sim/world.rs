//! Discrete-event world: nodes, radio links, batteries and the event loop.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::backup::{
    evaluate_backup, low_battery_flush, BackupContext, BackupEvent, BackupLog, BackupRule,
};
use crate::boot::{
    consumption_check_with, enter_emergency_mode, scan_cycle, BatteryObservation, BootCheck,
    BootParams, EmergencyBeacon, NodeMode, ScanResult,
};
use crate::frame::{parse_frame, EmergencyMessage, LocationBody, MessageKind, Parsed, Priority};
use crate::ids::{NodeId, SimAddress, SimTime};
use crate::locator::{
    locadvert_frame, locreply_frame, locreply_next_hop, whereami_frame, AnchoredLocation,
    LearnedLocation, LocatorParams, LocatorState, Position,
};
use crate::olsr::{HelloMessage, NodeProtocolState, OlsrParams, TcMessage};
use crate::pipeline::{Link, Pipeline, PipelineParams, StepOutcome};

use super::log::LogRecord;
use super::scenario::{NodeKind, NodeSpec, Scenario, ScenarioAction, ScenarioError};

/// Time after start by which routing is expected to have converged.
pub const CONVERGENCE_TIME: SimTime = SimTime(30_000);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimParams {
    pub seed: u64,
    pub olsr: OlsrParams,
    pub pipeline: PipelineParams,
    pub boot: BootParams,
    pub locator: LocatorParams,
    pub link_latency: SimTime,
    /// Delay between a queue becoming non-empty and its first service.
    pub service_time: SimTime,
    pub fwd_per_tick: usize,
    /// Service retry period while only swapped-out messages remain.
    pub swap_retry: SimTime,
    pub loss_rate: f64,
    /// Amplitude of the random error added to battery readings.
    pub battery_noise: f64,
    /// Recharge rate on mains, percent per hour. Zero keeps the level
    /// constant, so the first check after a power cut sees a drop.
    pub charge_per_hour: f64,
    pub backup_capacity: usize,
    pub handoff_battery_pct: f64,
    pub log_control: bool,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            seed: 0,
            olsr: OlsrParams::default(),
            pipeline: PipelineParams::default(),
            boot: BootParams::default(),
            locator: LocatorParams::default(),
            link_latency: SimTime::from_millis(50),
            service_time: SimTime::from_millis(100),
            fwd_per_tick: 4,
            swap_retry: SimTime::from_secs(10),
            loss_rate: 0.0,
            battery_noise: 0.0,
            charge_per_hour: 0.0,
            backup_capacity: 256,
            handoff_battery_pct: 20.0,
            log_control: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub addr: SimAddress,
    pub position: Position,
    pub range: f64,
    pub battery: f64,
    pub drain_per_hour: f64,
    pub ac_powered: bool,
    pub mode: NodeMode,
    pub anchor: Option<AnchoredLocation>,
    pub backup_rules: Vec<BackupRule>,
    pub info: String,
    pub station: Option<NodeId>,
    pub olsr: NodeProtocolState,
    pub pipeline: Pipeline,
    pub backup_log: BackupLog,
    pub locator: LocatorState,
    /// Messages addressed to this node, in arrival order.
    pub inbox: Vec<(SimTime, EmergencyMessage)>,
    msg_seq: u64,
    epoch: u64,
    last_check_level: f64,
    service_pending: bool,
    advertised: BTreeSet<NodeId>,
}

impl Node {
    pub fn is_up(&self) -> bool {
        self.mode != NodeMode::Down && self.battery > 0.0
    }

    /// Up and running the emergency protocols.
    pub fn is_active(&self) -> bool {
        self.mode == NodeMode::Emergency && self.battery > 0.0
    }

    fn next_msg_id(&mut self) -> String {
        self.msg_seq += 1;
        format!("{}-{}", self.id, self.msg_seq)
    }

    fn reset_volatile(&mut self, params: &SimParams) {
        self.olsr = NodeProtocolState::new(self.id.clone(), params.olsr);
        self.pipeline = Pipeline::new(params.pipeline);
        self.locator = LocatorState::default();
        self.service_pending = false;
        self.advertised.clear();
    }
}

/// A message that reached its destination.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub at: SimTime,
    pub node: NodeId,
    pub msg: EmergencyMessage,
}

/// Control-traffic counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ControlStats {
    pub hello_tx: u64,
    pub tc_originated: u64,
    /// TC transmissions including relays.
    pub tc_tx: u64,
    /// Transmissions blind flooding would have needed for the same TCs.
    pub tc_naive: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeInfo {
    pub id: NodeId,
    pub kind: NodeKind,
    pub addr: SimAddress,
    pub mode: NodeMode,
    pub battery: f64,
    pub position: Position,
    pub range: f64,
    pub anchor: Option<AnchoredLocation>,
    pub queued: usize,
    pub swapped: usize,
}

/// Read-only copy of the world handed to the station service.
#[derive(Debug, Clone)]
pub struct WorldSnapshot {
    pub t: SimTime,
    pub nodes: BTreeMap<NodeId, NodeInfo>,
    pub stations: BTreeMap<NodeId, NodeProtocolState>,
    pub r_max: f64,
}

#[derive(Debug, Clone)]
enum Payload {
    Hello(HelloMessage),
    Tc(TcMessage),
    Frame(Vec<u8>),
}

#[derive(Debug, Clone)]
enum Event {
    Scenario(ScenarioAction),
    Hello(NodeId, u64),
    Tc(NodeId, u64),
    BatteryCheck(NodeId, u64),
    Scan(NodeId, u64),
    Service(NodeId, u64),
    Deliver {
        to: NodeId,
        from: NodeId,
        payload: Payload,
    },
}

struct Scheduled {
    at: SimTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.cmp(&self.at).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorldError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is not running")]
    NotRunning(NodeId),
    #[error("no node has address {0}")]
    UnknownAddress(SimAddress),
    #[error("{0} is not a station")]
    NotStation(NodeId),
    #[error("invalid event: {0}")]
    Invalid(String),
}

pub struct World {
    params: SimParams,
    clock: SimTime,
    nodes: BTreeMap<NodeId, Node>,
    addr_book: BTreeMap<SimAddress, NodeId>,
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    rng: ChaCha8Rng,
    log: Vec<LogRecord>,
    delivered: Vec<Delivery>,
    stats: ControlStats,
    name: String,
}

impl World {
    pub fn from_scenario(sc: &Scenario) -> Result<World, ScenarioError> {
        Self::with_seed(sc, None)
    }

    /// Builds the world, overriding the scenario seed when `seed` is given.
    pub fn with_seed(sc: &Scenario, seed: Option<u64>) -> Result<World, ScenarioError> {
        let mut params = SimParams::default();
        sc.params.apply(&mut params)?;
        if let Some(s) = seed {
            params.seed = s;
        }
        let mut world = World {
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            params,
            clock: SimTime::ZERO,
            nodes: BTreeMap::new(),
            addr_book: BTreeMap::new(),
            heap: BinaryHeap::new(),
            seq: 0,
            log: Vec::new(),
            delivered: Vec::new(),
            stats: ControlStats::default(),
            name: sc.name.clone(),
        };
        for (i, spec) in sc.nodes.iter().enumerate() {
            world.add_node(spec, &format!("nodes[{i}]"))?;
        }
        let ids = sc.all_ids();
        let has_station = sc.nodes.iter().any(|n| n.kind == NodeKind::Station);
        for (i, spec) in sc.nodes.iter().enumerate() {
            if let Some(st) = &spec.station {
                let ok = sc
                    .nodes
                    .iter()
                    .any(|n| &n.id == st && n.kind == NodeKind::Station);
                if !ok {
                    return Err(ScenarioError::new(
                        format!("nodes[{i}].station"),
                        format!("{st} is not a declared station"),
                    ));
                }
            }
        }
        for (i, ev) in sc.events.iter().enumerate() {
            for r in ev.action.referenced() {
                if !ids.contains(r) {
                    return Err(ScenarioError::new(
                        format!("events[{i}].args"),
                        format!("unknown node {r}"),
                    ));
                }
            }
            match &ev.action {
                ScenarioAction::SendSOS { priority, .. } if Priority::new(*priority).is_none() => {
                    return Err(ScenarioError::new(
                        format!("events[{i}].args.priority"),
                        "must be 0..=4",
                    ));
                }
                ScenarioAction::SendSOS { to: Some(to), .. }
                    if !sc
                        .nodes
                        .iter()
                        .any(|n| &n.id == to && n.kind == NodeKind::Station) =>
                {
                    return Err(ScenarioError::new(
                        format!("events[{i}].args.to"),
                        format!("{to} is not a declared station"),
                    ));
                }
                ScenarioAction::SendSOS { .. } | ScenarioAction::StationReply { .. }
                    if !has_station =>
                {
                    return Err(ScenarioError::new(
                        format!("events[{i}]"),
                        "scenario declares no station",
                    ));
                }
                ScenarioAction::AirdropRouter(a) if sc.nodes.iter().any(|n| n.id == a.id) => {
                    return Err(ScenarioError::new(
                        format!("events[{i}].args.id"),
                        format!("{} already declared", a.id),
                    ));
                }
                _ => {}
            }
            world.schedule(ev.at, Event::Scenario(ev.action.clone()));
        }
        Ok(world)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn nodes(&self) -> &BTreeMap<NodeId, Node> {
        &self.nodes
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn stats(&self) -> &ControlStats {
        &self.stats
    }

    pub fn addr_of(&self, id: &NodeId) -> Option<SimAddress> {
        self.nodes.get(id).map(|n| n.addr)
    }

    pub fn id_of(&self, addr: &SimAddress) -> Option<&NodeId> {
        self.addr_book.get(addr)
    }

    pub fn deliveries(&self) -> &[Delivery] {
        &self.delivered
    }

    /// Largest radio range, the per-hop distance bound.
    pub fn r_max(&self) -> f64 {
        self.nodes.values().map(|n| n.range).fold(0.0, f64::max)
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|s| s.at)
    }

    /// Radio link oracle: both ends up and within the shorter range.
    pub fn linked(&self, a: &NodeId, b: &NodeId) -> bool {
        match (self.nodes.get(a), self.nodes.get(b)) {
            (Some(x), Some(y)) if a != b => {
                x.is_up() && y.is_up() && x.position.distance(&y.position) <= x.range.min(y.range)
            }
            _ => false,
        }
    }

    pub fn radio_neighbors(&self, a: &NodeId) -> Vec<NodeId> {
        self.nodes
            .keys()
            .filter(|b| self.linked(a, b))
            .cloned()
            .collect()
    }

    /// Ground-truth link graph among nodes running the emergency protocols.
    pub fn true_graph(&self) -> BTreeMap<NodeId, BTreeSet<NodeId>> {
        let active: Vec<&NodeId> = self
            .nodes
            .values()
            .filter(|n| n.is_active())
            .map(|n| &n.id)
            .collect();
        active
            .iter()
            .map(|a| {
                let nbrs = active
                    .iter()
                    .filter(|b| self.linked(a, b))
                    .map(|b| (*b).clone())
                    .collect();
                ((*a).clone(), nbrs)
            })
            .collect()
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        WorldSnapshot {
            t: self.clock,
            nodes: self
                .nodes
                .values()
                .map(|n| {
                    (
                        n.id.clone(),
                        NodeInfo {
                            id: n.id.clone(),
                            kind: n.kind,
                            addr: n.addr,
                            mode: n.mode,
                            battery: n.battery,
                            position: n.position,
                            range: n.range,
                            anchor: n.anchor.clone(),
                            queued: n.pipeline.bank.len(),
                            swapped: n.pipeline.store.swapped().len(),
                        },
                    )
                })
                .collect(),
            stations: self
                .nodes
                .values()
                .filter(|n| n.kind == NodeKind::Station)
                .map(|n| (n.id.clone(), n.olsr.clone()))
                .collect(),
            r_max: self.r_max(),
        }
    }

    /// Processes every event at the next timestamp and returns the log
    /// records it produced.
    pub fn step(&mut self) -> &[LogRecord] {
        let start = self.log.len();
        let Some(t) = self.next_event_time() else {
            return &self.log[start..];
        };
        self.advance_to(t);
        while self.heap.peek().is_some_and(|s| s.at == t) {
            let s = self.heap.pop().expect("peeked");
            self.handle(s.event);
        }
        &self.log[start..]
    }

    /// Runs every event strictly before `until`, then sets the clock to it.
    pub fn run_until(&mut self, until: SimTime) {
        while self.next_event_time().is_some_and(|t| t < until) {
            self.step();
        }
        if until > self.clock {
            self.advance_to(until);
        }
    }

    pub fn run_for(&mut self, d: SimTime) {
        self.run_until(self.clock + d);
    }

    /// Queues a scenario action at `at` (not before the current time).
    pub fn schedule_action(
        &mut self,
        at: SimTime,
        action: ScenarioAction,
    ) -> Result<(), WorldError> {
        for r in action.referenced() {
            if !self.nodes.contains_key(r) {
                return Err(WorldError::UnknownNode(r.clone()));
            }
        }
        match &action {
            ScenarioAction::SendSOS { priority, .. } if Priority::new(*priority).is_none() => {
                return Err(WorldError::Invalid("priority must be 0..=4".into()));
            }
            ScenarioAction::SendSOS { to: Some(to), .. }
                if self.nodes[to].kind != NodeKind::Station =>
            {
                return Err(WorldError::NotStation(to.clone()));
            }
            ScenarioAction::AirdropRouter(a) if self.nodes.contains_key(&a.id) => {
                return Err(WorldError::Invalid(format!("{} already exists", a.id)));
            }
            _ => {}
        }
        self.schedule(at.max(self.clock), Event::Scenario(action));
        Ok(())
    }

    /// Creates a priority-0 REPLY at `station` addressed to `victim`.
    pub fn inject_reply(
        &mut self,
        station: &NodeId,
        victim: SimAddress,
        text: &str,
    ) -> Result<String, WorldError> {
        let node = self
            .nodes
            .get_mut(station)
            .ok_or_else(|| WorldError::UnknownNode(station.clone()))?;
        if node.kind != NodeKind::Station {
            return Err(WorldError::NotStation(station.clone()));
        }
        if !node.is_active() {
            return Err(WorldError::NotRunning(station.clone()));
        }
        if !self.addr_book.contains_key(&victim) {
            return Err(WorldError::UnknownAddress(victim));
        }
        let id = node.next_msg_id();
        let msg = EmergencyMessage {
            id: id.clone(),
            kind: MessageKind::Reply,
            priority: Priority::HIGHEST,
            origin: node.addr,
            dest: victim,
            source_load: node.pipeline.load_pct(),
            personal_info: String::new(),
            body: text.to_string(),
            photo: None,
            trace: Vec::new(),
            swap_count: 0,
        };
        node.pipeline.bank.enqueue(msg);
        self.record(
            station,
            "REPLY",
            json!({"id": id, "to": victim.to_string()}),
        );
        self.record(station, "ENQUEUE", json!({"id": id, "queue": 0}));
        self.ensure_service(station);
        Ok(id)
    }

    /// Starts a passive locating query from `origin`.
    pub fn start_query(
        &mut self,
        origin: &NodeId,
        n_hops: Option<u32>,
    ) -> Result<String, WorldError> {
        let now = self.clock;
        let n_hops = n_hops.unwrap_or(self.params.locator.n_hops);
        let node = self
            .nodes
            .get_mut(origin)
            .ok_or_else(|| WorldError::UnknownNode(origin.clone()))?;
        if !node.is_active() {
            return Err(WorldError::NotRunning(origin.clone()));
        }
        let id = node.next_msg_id();
        node.locator.begin_query(id.clone(), n_hops, now);
        let frame = whereami_frame(id.clone(), node.addr, n_hops);
        self.record(origin, "WHEREAMI", json!({"id": id, "n_hops": n_hops}));
        self.broadcast_frame(origin, frame);
        Ok(id)
    }

    /// Hands raw bytes to `node` as if received over the air from `from`.
    pub fn inject_frame(
        &mut self,
        node: &NodeId,
        from: &NodeId,
        bytes: Vec<u8>,
    ) -> Result<(), WorldError> {
        if !self.nodes.contains_key(node) {
            return Err(WorldError::UnknownNode(node.clone()));
        }
        self.schedule(
            self.clock,
            Event::Deliver {
                to: node.clone(),
                from: from.clone(),
                payload: Payload::Frame(bytes),
            },
        );
        Ok(())
    }

    // ---- construction ----

    fn add_node(&mut self, spec: &NodeSpec, path: &str) -> Result<(), ScenarioError> {
        if self.nodes.contains_key(&spec.id) {
            return Err(ScenarioError::new(
                format!("{path}.id"),
                format!("duplicate id {}", spec.id),
            ));
        }
        if !(spec.x.is_finite() && spec.y.is_finite()) {
            return Err(ScenarioError::new(path, "coordinates must be finite"));
        }
        let range = spec.range.unwrap_or(spec.kind.default_range());
        if !(range.is_finite() && range > 0.0) {
            return Err(ScenarioError::new(
                format!("{path}.range"),
                "must be positive",
            ));
        }
        if !(0.0..=100.0).contains(&spec.battery) {
            return Err(ScenarioError::new(
                format!("{path}.battery"),
                "must lie in [0, 100]",
            ));
        }
        let drain = spec.drain.unwrap_or(spec.kind.default_drain());
        if !(drain.is_finite() && drain >= 0.0) {
            return Err(ScenarioError::new(
                format!("{path}.drain"),
                "must be non-negative",
            ));
        }
        if spec.kind == NodeKind::Phone && spec.anchor.is_some() {
            return Err(ScenarioError::new(
                format!("{path}.anchor"),
                "phones cannot be anchors",
            ));
        }
        if spec.kind != NodeKind::Router && !spec.backup_rules.is_empty() {
            return Err(ScenarioError::new(
                format!("{path}.backup_rules"),
                "only routers take backup rules",
            ));
        }
        if spec.station.is_some() && spec.kind != NodeKind::Phone {
            return Err(ScenarioError::new(
                format!("{path}.station"),
                "only phones name a station",
            ));
        }
        let addr = match spec.addr {
            Some(a) => a,
            None => self.auto_addr(spec.kind),
        };
        if (spec.kind == NodeKind::Station) != addr.is_station_reserved() {
            return Err(ScenarioError::new(
                format!("{path}.addr"),
                if spec.kind == NodeKind::Station {
                    format!("station address {addr} outside the reserved station block")
                } else {
                    format!("{addr} lies in the reserved station block")
                },
            ));
        }
        if addr == SimAddress::BROADCAST || self.addr_book.contains_key(&addr) {
            return Err(ScenarioError::new(
                format!("{path}.addr"),
                format!("address {addr} already in use"),
            ));
        }
        let mode = spec.mode.unwrap_or(match spec.kind {
            NodeKind::Router if spec.ac_powered => NodeMode::Dormant,
            _ => NodeMode::Emergency,
        });
        let node = Node {
            id: spec.id.clone(),
            kind: spec.kind,
            addr,
            position: Position::new(spec.x, spec.y),
            range,
            battery: spec.battery,
            drain_per_hour: drain,
            ac_powered: spec.ac_powered,
            mode,
            anchor: spec.anchor.map(|a| AnchoredLocation {
                node: spec.id.clone(),
                position: Position::new(a.x, a.y),
                source: a.source,
            }),
            backup_rules: spec.backup_rules.clone(),
            info: spec.info.clone(),
            station: spec.station.clone(),
            olsr: NodeProtocolState::new(spec.id.clone(), self.params.olsr),
            pipeline: Pipeline::new(self.params.pipeline),
            backup_log: BackupLog::new(self.params.backup_capacity),
            locator: LocatorState::default(),
            inbox: Vec::new(),
            msg_seq: 0,
            epoch: 0,
            last_check_level: spec.battery,
            service_pending: false,
            advertised: BTreeSet::new(),
        };
        self.addr_book.insert(addr, spec.id.clone());
        let id = spec.id.clone();
        self.record(
            &id,
            "INIT",
            json!({
                "kind": spec.kind.as_str(),
                "addr": addr.to_string(),
                "x": spec.x,
                "y": spec.y,
                "range": range,
                "mode": mode.to_string(),
                "battery": spec.battery,
                "anchor": node.anchor.is_some(),
            }),
        );
        self.nodes.insert(id.clone(), node);
        self.start_timers(&id);
        Ok(())
    }

    fn auto_addr(&self, kind: NodeKind) -> SimAddress {
        let (b, c) = match kind {
            NodeKind::Phone => (1, 0),
            NodeKind::Router => (2, 0),
            NodeKind::Station => (99, 0),
        };
        (0u32..)
            .map(|k| {
                if kind == NodeKind::Station {
                    SimAddress::new(10, b, c, (k + 1) as u8)
                } else {
                    SimAddress::new(10, b, (k / 254) as u8, (k % 254 + 1) as u8)
                }
            })
            .find(|a| !self.addr_book.contains_key(a))
            .expect("address space exhausted")
    }

    /// Starts the periodic timers that fit the node's mode, with random
    /// phases so nodes do not fire in lockstep.
    fn start_timers(&mut self, id: &NodeId) {
        let Some(node) = self.nodes.get(id) else {
            return;
        };
        let epoch = node.epoch;
        let now = self.clock;
        match node.mode {
            NodeMode::Emergency => {
                let h = self.phase(self.params.olsr.hello_interval);
                let t = self.phase(self.params.olsr.tc_interval);
                self.schedule(now + h, Event::Hello(id.clone(), epoch));
                self.schedule(now + t, Event::Tc(id.clone(), epoch));
            }
            NodeMode::Dormant => {
                let b = self.phase(self.params.boot.battery_check_interval);
                let s = self.phase(self.params.boot.scan_interval);
                self.schedule(now + b, Event::BatteryCheck(id.clone(), epoch));
                self.schedule(now + s, Event::Scan(id.clone(), epoch));
            }
            NodeMode::Down => {}
        }
    }

    fn phase(&mut self, interval: SimTime) -> SimTime {
        SimTime::from_millis(self.rng.random_range(1..=interval.as_millis().max(1)))
    }

    fn schedule(&mut self, at: SimTime, event: Event) {
        self.seq += 1;
        self.heap.push(Scheduled {
            at,
            seq: self.seq,
            event,
        });
    }

    fn record(&mut self, node: &NodeId, kind: &str, detail: Value) {
        self.log
            .push(LogRecord::new(self.clock, node.as_str(), kind, detail));
    }

    // ---- time and batteries ----

    fn advance_to(&mut self, t: SimTime) {
        if t <= self.clock {
            return;
        }
        let hours = (t.as_millis() - self.clock.as_millis()) as f64 / 3_600_000.0;
        let threshold = self.params.handoff_battery_pct;
        let charge = self.params.charge_per_hour;
        let mut crossed = Vec::new();
        let mut emptied = Vec::new();
        for n in self.nodes.values_mut() {
            if n.mode == NodeMode::Down {
                continue;
            }
            let before = n.battery;
            n.battery = if n.ac_powered {
                (n.battery + charge * hours).min(100.0)
            } else {
                (n.battery - n.drain_per_hour * hours).max(0.0)
            };
            if before >= threshold
                && n.battery < threshold
                && n.kind == NodeKind::Router
                && n.is_active()
            {
                crossed.push(n.id.clone());
            }
            if before > 0.0 && n.battery <= 0.0 {
                emptied.push(n.id.clone());
            }
        }
        self.clock = t;
        for id in emptied {
            self.record(&id, "BATTERY_EMPTY", json!({}));
        }
        for id in crossed {
            self.flush_low_battery(&id);
        }
    }

    // ---- event dispatch ----

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Scenario(a) => self.apply_action(a),
            Event::Hello(n, e) => self.on_hello_timer(&n, e),
            Event::Tc(n, e) => self.on_tc_timer(&n, e),
            Event::BatteryCheck(n, e) => self.on_battery_check(&n, e),
            Event::Scan(n, e) => self.on_scan(&n, e),
            Event::Service(n, e) => self.on_service(&n, e),
            Event::Deliver { to, from, payload } => match payload {
                Payload::Hello(h) => self.on_hello(&to, &h),
                Payload::Tc(tc) => self.on_tc(&to, &from, tc),
                Payload::Frame(bytes) => self.on_frame(&to, &from, &bytes),
            },
        }
    }

    fn current(&self, id: &NodeId, epoch: u64) -> bool {
        self.nodes.get(id).is_some_and(|n| n.epoch == epoch)
    }

    fn active(&self, id: &NodeId) -> bool {
        self.nodes.get(id).is_some_and(Node::is_active)
    }

    fn lossy(&mut self) -> bool {
        self.params.loss_rate > 0.0 && self.rng.random_bool(self.params.loss_rate)
    }

    fn broadcast(&mut self, from: &NodeId, payload: Payload) {
        let at = self.clock + self.params.link_latency;
        for to in self.radio_neighbors(from) {
            if self.lossy() {
                continue;
            }
            self.schedule(
                at,
                Event::Deliver {
                    to,
                    from: from.clone(),
                    payload: payload.clone(),
                },
            );
        }
    }

    fn broadcast_frame(&mut self, from: &NodeId, mut msg: EmergencyMessage) {
        msg.trace.push(from.clone());
        self.broadcast(from, Payload::Frame(msg.to_bytes()));
    }

    /// Unicast outside the queues. Appends `from` to the trace.
    fn send_direct(&mut self, from: &NodeId, to: &NodeId, mut msg: EmergencyMessage) -> bool {
        if !self.linked(from, to) {
            return false;
        }
        msg.trace.push(from.clone());
        if self.lossy() {
            self.record(
                from,
                "LOST",
                json!({"id": msg.id, "to": to.as_str(), "reason": "loss"}),
            );
        } else {
            self.schedule(
                self.clock + self.params.link_latency,
                Event::Deliver {
                    to: to.clone(),
                    from: from.clone(),
                    payload: Payload::Frame(msg.to_bytes()),
                },
            );
        }
        true
    }

    fn on_hello_timer(&mut self, id: &NodeId, epoch: u64) {
        if !self.current(id, epoch) || !self.active(id) {
            return;
        }
        let now = self.clock;
        let node = self.nodes.get_mut(id).expect("current node");
        node.olsr.expire_state(now);
        let hello = node.olsr.generate_hello(now);
        self.stats.hello_tx += 1;
        if self.params.log_control {
            self.record(
                id,
                "HELLO_TX",
                json!({"seq": hello.seq, "listed": hello.listed.len()}),
            );
        }
        self.post_olsr(id);
        self.broadcast(id, Payload::Hello(hello));
        self.schedule(
            now + self.params.olsr.hello_interval,
            Event::Hello(id.clone(), epoch),
        );
    }

    fn on_tc_timer(&mut self, id: &NodeId, epoch: u64) {
        if !self.current(id, epoch) || !self.active(id) {
            return;
        }
        let now = self.clock;
        let active = self.nodes.values().filter(|n| n.is_active()).count() as u64;
        let node = self.nodes.get_mut(id).expect("current node");
        node.olsr.expire_state(now);
        if let Some(tc) = node.olsr.generate_tc() {
            self.stats.tc_originated += 1;
            self.stats.tc_tx += 1;
            self.stats.tc_naive += active;
            if self.params.log_control {
                let adv: Vec<&str> = tc.advertised.iter().map(NodeId::as_str).collect();
                self.record(id, "TC_ORIG", json!({"ansn": tc.ansn, "advertised": adv}));
            }
            self.broadcast(id, Payload::Tc(tc));
        }
        self.post_olsr(id);
        self.schedule(
            now + self.params.olsr.tc_interval,
            Event::Tc(id.clone(), epoch),
        );
    }

    fn on_hello(&mut self, to: &NodeId, hello: &HelloMessage) {
        if !self.active(to) {
            return;
        }
        let now = self.clock;
        let node = self.nodes.get_mut(to).expect("active node");
        node.olsr.expire_state(now);
        node.olsr.handle_hello(hello, now);
        self.post_olsr(to);
    }

    fn on_tc(&mut self, to: &NodeId, from: &NodeId, mut tc: TcMessage) {
        if !self.active(to) {
            return;
        }
        let now = self.clock;
        let node = self.nodes.get_mut(to).expect("active node");
        node.olsr.expire_state(now);
        let forward = node.olsr.handle_tc(&tc, from, now);
        if self.params.log_control {
            self.record(
                to,
                "TC_RX",
                json!({"originator": tc.originator.as_str(), "ansn": tc.ansn, "from": from.as_str(), "forward": forward}),
            );
        }
        self.post_olsr(to);
        if forward && tc.ttl_hops > 1 {
            tc.ttl_hops -= 1;
            self.stats.tc_tx += 1;
            self.broadcast(to, Payload::Tc(tc));
        }
    }

    /// Runs after any change to a node's OLSR state: active location
    /// adverts from anchored infrastructure nodes.
    fn post_olsr(&mut self, id: &NodeId) {
        let now = self.clock;
        let n_hops = self.params.locator.n_hops;
        let window = self.params.locator.dedup_window;
        let Some(node) = self.nodes.get(id) else {
            return;
        };
        let Some(anchor) = node.anchor.clone() else {
            return;
        };
        if node.kind == NodeKind::Phone || !node.is_active() {
            return;
        }
        let in_reach: BTreeSet<NodeId> = node
            .olsr
            .routing_table()
            .iter()
            .filter(|(d, r)| {
                r.hop_count <= n_hops
                    && self
                        .nodes
                        .get(*d)
                        .is_some_and(|n| n.kind == NodeKind::Phone)
            })
            .map(|(d, _)| d.clone())
            .collect();
        let node = self.nodes.get_mut(id).expect("node exists");
        let joined: BTreeSet<NodeId> = in_reach.difference(&node.advertised).cloned().collect();
        node.advertised = in_reach;
        let due = node.locator.adverts_due(&joined, now, window);
        for target in due {
            let (Some(to_addr), Some(route)) = (
                self.nodes.get(&target).map(|n| n.addr),
                self.nodes[id].olsr.routing_table().get(&target).cloned(),
            ) else {
                self.nodes
                    .get_mut(id)
                    .expect("node")
                    .locator
                    .advert_failed(&target);
                continue;
            };
            let node = self.nodes.get_mut(id).expect("node");
            let msg_id = node.next_msg_id();
            let msg = locadvert_frame(msg_id.clone(), &anchor, node.addr, to_addr, route.hop_count);
            if self.send_direct(id, &route.next_hop, msg) {
                self.nodes
                    .get_mut(id)
                    .expect("node")
                    .locator
                    .advert_sent(&target, now);
                self.record(
                    id,
                    "LOCADVERT",
                    json!({"id": msg_id, "to": target.as_str(), "hops": route.hop_count}),
                );
            } else {
                self.nodes
                    .get_mut(id)
                    .expect("node")
                    .locator
                    .advert_failed(&target);
            }
        }
    }

    fn on_battery_check(&mut self, id: &NodeId, epoch: u64) {
        if !self.current(id, epoch) {
            return;
        }
        let noise = self.params.battery_noise;
        let jitter = if noise > 0.0 {
            self.rng.random_range(-noise..=noise)
        } else {
            0.0
        };
        let now = self.clock;
        let threshold = self.params.boot.consumption_threshold;
        let node = self.nodes.get_mut(id).expect("current node");
        if node.mode != NodeMode::Dormant {
            return;
        }
        let obs = BatteryObservation {
            last_check_level: node.last_check_level,
            current_level: (node.battery + jitter).clamp(0.0, 100.0),
            checked_at: now,
        };
        node.last_check_level = obs.current_level;
        if consumption_check_with(&obs, threshold) == BootCheck::TriggerBoot {
            let detail = json!({"reason": "consumption", "last": obs.last_check_level, "current": obs.current_level});
            self.boot(id, detail);
        } else {
            self.schedule(
                now + self.params.boot.battery_check_interval,
                Event::BatteryCheck(id.clone(), epoch),
            );
        }
    }

    fn on_scan(&mut self, id: &NodeId, epoch: u64) {
        if !self.current(id, epoch) || self.nodes[id].mode != NodeMode::Dormant {
            return;
        }
        let beacons: Vec<EmergencyBeacon> = self
            .radio_neighbors(id)
            .into_iter()
            .filter(|b| self.active(b))
            .map(|b| {
                let st = self.nodes[&b].kind == NodeKind::Station;
                EmergencyBeacon::new(b, st)
            })
            .collect();
        match scan_cycle(&beacons, self.clock, self.params.boot.scan_interval) {
            ScanResult::JoinEmergency(target) => {
                let detail = json!({"reason": "scan", "heard": target.as_str()});
                self.boot(id, detail);
            }
            ScanResult::WaitRetry(at) => self.schedule(at, Event::Scan(id.clone(), epoch)),
        }
    }

    fn boot(&mut self, id: &NodeId, detail: Value) {
        let node = self.nodes.get_mut(id).expect("node");
        if !enter_emergency_mode(&mut node.mode) {
            return;
        }
        node.epoch += 1;
        let beacon = EmergencyBeacon::new(id.clone(), node.kind == NodeKind::Station).to_string();
        self.record(id, "BOOT", detail);
        self.record(id, "MODE", json!({"mode": "emergency"}));
        self.record(id, "BEACON", json!({"line": beacon}));
        self.start_timers(id);
    }

    // ---- scenario actions ----

    fn apply_action(&mut self, action: ScenarioAction) {
        let detail = serde_json::to_value(&action).expect("action serializes");
        let subject = action
            .referenced()
            .first()
            .map(|n| (*n).clone())
            .or_else(|| match &action {
                ScenarioAction::AirdropRouter(a) => Some(a.id.clone()),
                _ => None,
            })
            .unwrap_or_else(|| NodeId::new("world").expect("valid id"));
        self.record(&subject, "SCENARIO", detail);
        match action {
            ScenarioAction::KillNode { node } => self.kill(&node),
            ScenarioAction::PartialCrash { nodes } => {
                for n in nodes {
                    self.kill(&n);
                }
            }
            ScenarioAction::CutACPower { node } => {
                if let Some(n) = self.nodes.get_mut(&node) {
                    n.ac_powered = false;
                }
            }
            ScenarioAction::RestorePower { node } => {
                if let Some(n) = self.nodes.get_mut(&node) {
                    n.ac_powered = true;
                }
            }
            ScenarioAction::MoveNode { node, x, y } => {
                if let Some(n) = self.nodes.get_mut(&node) {
                    n.position = Position::new(x, y);
                }
            }
            ScenarioAction::DrainBattery { node, rate } => {
                if let Some(n) = self.nodes.get_mut(&node) {
                    n.drain_per_hour = rate.max(0.0);
                }
            }
            ScenarioAction::AirdropRouter(spec) => {
                let path = format!("airdrop {}", spec.id);
                if let Err(e) = self.add_node(&spec.to_node_spec(), &path) {
                    self.record(&subject, "ERROR", json!({"error": e.to_string()}));
                }
            }
            ScenarioAction::SendSOS {
                from,
                priority,
                body,
                photo,
                to,
            } => self.send_sos(&from, to, priority, body, photo),
            ScenarioAction::RebootNode { node } => self.reboot(&node),
            ScenarioAction::WhereAmI { from, n_hops } => {
                if let Err(e) = self.start_query(&from, n_hops) {
                    self.record(&from, "ERROR", json!({"error": e.to_string()}));
                }
            }
            ScenarioAction::StationReply {
                victim,
                text,
                station,
            } => {
                let station = station.or_else(|| self.default_station());
                let res = match (station, self.addr_of(&victim)) {
                    (Some(st), Some(addr)) => self.inject_reply(&st, addr, &text).map(|_| ()),
                    (None, _) => Err(WorldError::Invalid("no station".into())),
                    (_, None) => Err(WorldError::UnknownNode(victim.clone())),
                };
                if let Err(e) = res {
                    self.record(&subject, "ERROR", json!({"error": e.to_string()}));
                }
            }
        }
    }

    fn default_station(&self) -> Option<NodeId> {
        self.nodes
            .values()
            .find(|n| n.kind == NodeKind::Station)
            .map(|n| n.id.clone())
    }

    fn kill(&mut self, id: &NodeId) {
        if let Some(n) = self.nodes.get_mut(id) {
            if n.mode != NodeMode::Down {
                n.mode = NodeMode::Down;
                n.epoch += 1;
                n.service_pending = false;
                self.record(id, "DOWN", json!({}));
            }
        }
    }

    fn reboot(&mut self, id: &NodeId) {
        let params = self.params.clone();
        let Some(n) = self.nodes.get_mut(id) else {
            return;
        };
        n.reset_volatile(&params);
        n.epoch += 1;
        n.mode = match n.kind {
            NodeKind::Router if n.ac_powered => NodeMode::Dormant,
            _ => NodeMode::Emergency,
        };
        n.last_check_level = n.battery;
        let recovered = n.backup_log.messages();
        let count = recovered.len();
        for m in recovered {
            n.pipeline.bank.enqueue(m);
        }
        let mode = n.mode;
        self.record(
            id,
            "REBOOT",
            json!({"mode": mode.to_string(), "recovered": count}),
        );
        self.start_timers(id);
        if count > 0 && mode == NodeMode::Emergency {
            self.ensure_service(id);
        }
    }

    fn send_sos(
        &mut self,
        from: &NodeId,
        to: Option<NodeId>,
        priority: u8,
        body: String,
        photo: Option<String>,
    ) {
        let dest = {
            let Some(n) = self.nodes.get(from) else {
                return;
            };
            let st = to
                .or_else(|| n.station.clone())
                .or_else(|| self.default_station());
            st.and_then(|s| self.addr_of(&s))
        };
        if !self.active(from) {
            self.record(
                from,
                "ERROR",
                json!({"error": "SOS from a node that is not running"}),
            );
            return;
        }
        let photo = match photo.map(|p| base64::engine::general_purpose::STANDARD.decode(p)) {
            Some(Ok(p)) => Some(p),
            Some(Err(e)) => {
                self.record(from, "ERROR", json!({"error": format!("photo: {e}")}));
                return;
            }
            None => None,
        };
        let (Some(dest), Some(prio)) = (dest, Priority::new(priority)) else {
            self.record(
                from,
                "ERROR",
                json!({"error": "SOS without station or with bad priority"}),
            );
            return;
        };
        let node = self.nodes.get_mut(from).expect("active node");
        let id = node.next_msg_id();
        let msg = EmergencyMessage {
            id: id.clone(),
            kind: MessageKind::Sos,
            priority: prio,
            origin: node.addr,
            dest,
            source_load: node.pipeline.load_pct(),
            personal_info: node.info.clone(),
            body,
            photo,
            trace: Vec::new(),
            swap_count: 0,
        };
        node.pipeline.bank.enqueue(msg);
        self.record(
            from,
            "SOS",
            json!({"id": id, "priority": priority, "to": dest.to_string()}),
        );
        self.record(from, "ENQUEUE", json!({"id": id, "queue": priority}));
        self.ensure_service(from);
    }

    // ---- data plane ----

    fn on_frame(&mut self, to: &NodeId, from: &NodeId, bytes: &[u8]) {
        let parsed = parse_frame(bytes);
        if !self.active(to) {
            let id = match &parsed {
                Ok(Parsed::Emergency(m)) => m.id.clone(),
                _ => String::new(),
            };
            self.record(
                to,
                "LOST",
                json!({"id": id, "from": from.as_str(), "reason": "receiver not running"}),
            );
            return;
        }
        match parsed {
            Ok(Parsed::NotEmergency) => {
                self.record(
                    to,
                    "FILTERED",
                    json!({"from": from.as_str(), "bytes": bytes.len()}),
                );
            }
            Err(e) => {
                self.record(
                    to,
                    "MALFORMED",
                    json!({"from": from.as_str(), "error": e.to_string()}),
                );
            }
            Ok(Parsed::Emergency(m)) => self.on_emergency(to, m),
        }
    }

    fn on_emergency(&mut self, at: &NodeId, m: EmergencyMessage) {
        let now = self.clock;
        let my_addr = self.nodes[at].addr;
        match m.kind {
            MessageKind::WhereAmI => {
                let node = self.nodes.get_mut(at).expect("node");
                let anchor = node.anchor.clone();
                let act = node.locator.on_whereami(at, anchor.is_some(), &m);
                if let (true, Some(anchor)) = (act.reply, anchor) {
                    let rid = node.next_msg_id();
                    let reply = locreply_frame(rid.clone(), &anchor, my_addr, &m);
                    let route: Vec<NodeId> = m.trace.iter().rev().cloned().collect();
                    self.record(
                        at,
                        "LOCREPLY",
                        json!({"id": rid, "query": m.id, "hops": m.trace.len()}),
                    );
                    self.forward_source_routed(at, &route, reply);
                }
                if act.relay {
                    self.broadcast_frame(at, m);
                }
            }
            MessageKind::LocReply => {
                let Some(body) = LocationBody::decode(&m.body) else {
                    self.record(
                        at,
                        "MALFORMED",
                        json!({"id": m.id, "error": "location body"}),
                    );
                    return;
                };
                if m.dest == my_addr {
                    let anchor = self.addr_book.get(&m.origin).cloned();
                    let (Some(anchor), Some(x), Some(y), Some(q)) =
                        (anchor, body.x, body.y, body.query)
                    else {
                        return;
                    };
                    let loc = LearnedLocation {
                        anchor: anchor.clone(),
                        position: Position::new(x, y),
                        hops: body.hops,
                        at: now,
                    };
                    let timeout = self.params.locator.query_timeout;
                    let node = self.nodes.get_mut(at).expect("node");
                    let accepted = node.locator.on_locreply(&q, loc.clone(), timeout);
                    if accepted {
                        node.locator.learned.push(loc);
                    }
                    self.record(
                        at,
                        "LOCATED",
                        json!({"query": q, "anchor": anchor.as_str(), "hops": body.hops, "accepted": accepted}),
                    );
                } else {
                    self.forward_source_routed(at, &body.route, m);
                }
            }
            MessageKind::LocAdvert => {
                if m.dest == my_addr {
                    let Some(body) = LocationBody::decode(&m.body) else {
                        return;
                    };
                    let anchor = self.addr_book.get(&m.origin).cloned();
                    if let (Some(anchor), Some(x), Some(y)) = (anchor, body.x, body.y) {
                        self.record(
                            at,
                            "LOCATED",
                            json!({"anchor": anchor.as_str(), "hops": body.hops, "advert": true}),
                        );
                        self.nodes.get_mut(at).expect("node").locator.learned.push(
                            LearnedLocation {
                                anchor,
                                position: Position::new(x, y),
                                hops: body.hops,
                                at: now,
                            },
                        );
                    }
                } else {
                    let dest = self.addr_book.get(&m.dest).cloned();
                    let next = dest.and_then(|d| self.nodes[at].olsr.next_hop(&d).cloned());
                    let id = m.id.clone();
                    if !next.is_some_and(|nh| self.send_direct(at, &nh, m)) {
                        self.record(at, "LOST", json!({"id": id, "reason": "no route"}));
                    }
                }
            }
            MessageKind::Sos | MessageKind::Reply => {
                if m.dest == my_addr {
                    self.record(
                        at,
                        "DELIVERED",
                        json!({
                            "id": m.id,
                            "type": m.kind.as_str(),
                            "priority": m.priority.level(),
                            "hops": m.trace.len(),
                            "trace": m.trace.iter().map(NodeId::as_str).collect::<Vec<_>>(),
                        }),
                    );
                    self.nodes
                        .get_mut(at)
                        .expect("node")
                        .inbox
                        .push((now, m.clone()));
                    self.delivered.push(Delivery {
                        at: now,
                        node: at.clone(),
                        msg: m,
                    });
                } else {
                    self.relay_admit(at, m);
                }
            }
        }
    }

    fn forward_source_routed(&mut self, at: &NodeId, route: &[NodeId], msg: EmergencyMessage) {
        let id = msg.id.clone();
        let next = locreply_next_hop(at, route);
        if !next.is_some_and(|nh| self.send_direct(at, &nh, msg)) {
            self.record(at, "LOST", json!({"id": id, "reason": "route broken"}));
        }
    }

    fn relay_admit(&mut self, at: &NodeId, m: EmergencyMessage) {
        let node = self.nodes.get_mut(at).expect("node");
        let id = m.id.clone();
        let queue = m.priority.index();
        let ctx = BackupContext {
            event: BackupEvent::Received,
            battery_pct: node.battery,
            local_load_pct: node.pipeline.load_pct() as f64,
            source_load_pct: m.source_load as f64,
            msg_priority: m.priority.level(),
        };
        let backup =
            (!node.backup_rules.is_empty()).then(|| evaluate_backup(&node.backup_rules, &ctx));
        let copy = backup.as_ref().filter(|d| d.backup).map(|_| m.clone());
        if let Err(e) = node.pipeline.admit(m, ctx.battery_pct) {
            self.record(
                at,
                "REJECT",
                json!({"id": id, "reason": e.to_string(), "battery": ctx.battery_pct}),
            );
            return;
        }
        self.record(at, "ENQUEUE", json!({"id": id, "queue": queue}));
        if let (Some(copy), Some(d)) = (copy, backup) {
            let receipt = self
                .nodes
                .get_mut(at)
                .expect("node")
                .backup_log
                .persist_backup(&copy);
            self.record(
                at,
                "BACKUP",
                json!({"id": id, "event": "received", "option": d.decided_by, "offset": receipt.offset}),
            );
            for ev in receipt.evicted {
                self.record(at, "EVICT", json!({"id": ev}));
            }
        }
        self.ensure_service(at);
    }

    fn ensure_service(&mut self, id: &NodeId) {
        let at = self.clock + self.params.service_time;
        let Some(node) = self.nodes.get_mut(id) else {
            return;
        };
        if node.service_pending || !node.is_active() {
            return;
        }
        node.service_pending = true;
        let epoch = node.epoch;
        self.schedule(at, Event::Service(id.clone(), epoch));
    }

    fn on_service(&mut self, id: &NodeId, epoch: u64) {
        if !self.current(id, epoch) {
            return;
        }
        if !self.active(id) {
            self.nodes.get_mut(id).expect("node").service_pending = false;
            return;
        }
        let now = self.clock;
        let node = self.nodes.get_mut(id).expect("node");
        node.olsr.expire_state(now);
        let before = node.pipeline.bank.occupancy();
        for sid in node.pipeline.swap_in() {
            self.record(
                id,
                "SWAP_IN",
                json!({"id": sid, "queue": 1, "occupancy": before}),
            );
        }
        let mut pipeline = std::mem::take(&mut self.nodes.get_mut(id).expect("node").pipeline);
        for _ in 0..self.params.fwd_per_tick {
            let outcome = {
                let mut link = WorldLink {
                    world: self,
                    node: id,
                    local_load: pipeline.load_pct(),
                };
                pipeline.step(id, &mut link)
            };
            match outcome {
                StepOutcome::NoWork => break,
                StepOutcome::Sent {
                    id: mid,
                    queue,
                    next_hop,
                    occupancy,
                    cascaded,
                } => {
                    self.record(
                        id,
                        "SEND",
                        json!({"id": mid, "queue": queue, "to": next_hop.as_str(), "occupancy": occupancy}),
                    );
                    if cascaded {
                        self.record(
                            id,
                            "CASCADE",
                            json!({"occupancy": pipeline.bank.occupancy()}),
                        );
                    }
                }
                StepOutcome::Requeued {
                    id: mid,
                    from,
                    to,
                    occupancy,
                } => self.record(
                    id,
                    "REQUEUE",
                    json!({"id": mid, "from": from, "to": to, "occupancy": occupancy}),
                ),
                StepOutcome::SwappedOut {
                    id: mid,
                    swap_count,
                    occupancy,
                } => self.record(
                    id,
                    "SWAP_OUT",
                    json!({"id": mid, "swaps": swap_count, "occupancy": occupancy}),
                ),
                StepOutcome::Archived {
                    id: mid,
                    swap_count,
                    occupancy,
                } => self.record(
                    id,
                    "ARCHIVE",
                    json!({"id": mid, "swaps": swap_count, "occupancy": occupancy}),
                ),
            }
        }
        let next = if !pipeline.bank.is_empty() {
            Some(self.params.service_time)
        } else if !pipeline.store.swapped().is_empty() {
            Some(self.params.swap_retry)
        } else {
            None
        };
        let node = self.nodes.get_mut(id).expect("node");
        node.pipeline = pipeline;
        match next {
            Some(d) => self.schedule(now + d, Event::Service(id.clone(), epoch)),
            None => node.service_pending = false,
        }
    }

    /// Empties the queues of a router whose battery just fell below the
    /// handoff threshold.
    fn flush_low_battery(&mut self, id: &NodeId) {
        let neighbors: BTreeMap<NodeId, f64> = self.nodes[id]
            .olsr
            .symmetric_neighbors()
            .into_iter()
            .filter(|n| self.linked(id, n) && self.active(n))
            .map(|n| {
                let b = self.nodes[&n].battery;
                (n, b)
            })
            .collect();
        let addr_book = &self.addr_book;
        let node = self.nodes.get_mut(id).expect("node");
        if neighbors.is_empty() {
            let msgs: Vec<EmergencyMessage> = node.pipeline.bank.iter().cloned().collect();
            for m in msgs {
                let receipt = self
                    .nodes
                    .get_mut(id)
                    .expect("node")
                    .backup_log
                    .persist_backup(&m);
                self.record(
                    id,
                    "BACKUP",
                    json!({"id": m.id, "event": "low_battery", "offset": receipt.offset}),
                );
            }
            return;
        }
        let olsr = &node.olsr;
        let sends = low_battery_flush(
            &mut node.pipeline.bank,
            |dest| addr_book.get(dest).and_then(|d| olsr.next_hop(d).cloned()),
            &neighbors,
        );
        for (to, m) in sends {
            let mid = m.id.clone();
            if self.send_direct(id, &to, m.clone()) {
                self.record(id, "FLUSH", json!({"id": mid, "to": to.as_str()}));
            } else {
                self.nodes
                    .get_mut(id)
                    .expect("node")
                    .pipeline
                    .bank
                    .enqueue(m);
            }
        }
    }
}

/// The world as seen by one node's forwarding stage.
struct WorldLink<'a> {
    world: &'a mut World,
    node: &'a NodeId,
    local_load: u8,
}

impl Link for WorldLink<'_> {
    fn next_hop(&self, dest: &SimAddress) -> Option<NodeId> {
        let d = self.world.addr_book.get(dest)?;
        self.world.nodes[self.node].olsr.next_hop(d).cloned()
    }

    fn transmit(&mut self, next_hop: &NodeId, msg: &EmergencyMessage) -> bool {
        let w = &mut *self.world;
        if !w.linked(self.node, next_hop) {
            return false;
        }
        let node = w.nodes.get_mut(self.node).expect("node");
        if !node.backup_rules.is_empty() {
            let ctx = BackupContext {
                event: BackupEvent::Forwarded,
                battery_pct: node.battery,
                local_load_pct: self.local_load as f64,
                source_load_pct: msg.source_load as f64,
                msg_priority: msg.priority.level(),
            };
            let d = evaluate_backup(&node.backup_rules, &ctx);
            if d.backup {
                let receipt = node.backup_log.persist_backup(msg);
                w.record(
                    self.node,
                    "BACKUP",
                    json!({"id": msg.id, "event": "forwarded", "option": d.decided_by, "offset": receipt.offset}),
                );
                for ev in receipt.evicted {
                    w.record(self.node, "EVICT", json!({"id": ev}));
                }
            }
        }
        if w.lossy() {
            w.record(
                self.node,
                "LOST",
                json!({"id": msg.id, "to": next_hop.as_str(), "reason": "loss"}),
            );
        } else {
            let at = w.clock + w.params.link_latency;
            w.schedule(
                at,
                Event::Deliver {
                    to: next_hop.clone(),
                    from: self.node.clone(),
                    payload: Payload::Frame(msg.to_bytes()),
                },
            );
        }
        true
    }
}
