//! Station service: ingests SOS traffic arriving at station nodes, keeps
//! victim records, issues replies and answers topology and position
//! queries. Reads world snapshots; changes the world only through
//! commands executed by [`Session`].

use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::boot::NodeMode;
use crate::frame::MessageKind;
use crate::ids::{NodeId, SimAddress, SimTime};
use crate::locator::{estimate_position, Position, PositionEstimate, TopologyView};
use crate::sim::{Delivery, LogRecord, NodeKind, ScenarioAction, World, WorldError, WorldSnapshot};

#[derive(Debug, Error, PartialEq)]
pub enum StationError {
    #[error("unknown victim {0}")]
    UnknownVictim(String),
    #[error("reply text is empty")]
    EmptyReply,
    #[error("{0}")]
    Forbidden(String),
    #[error(transparent)]
    World(#[from] WorldError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InboxEntry {
    pub seq: u64,
    pub received_at: f64,
    pub station: NodeId,
    pub id: String,
    #[serde(rename = "type")]
    pub kind: &'static str,
    pub priority: u8,
    pub origin: SimAddress,
    pub victim: Option<NodeId>,
    pub personal_info: String,
    pub body: String,
    pub photo_sha256: Option<String>,
    pub photo_bytes: usize,
    pub hops: usize,
    pub trace: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplyRecord {
    pub id: String,
    pub text: String,
    pub sent_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VictimRecord {
    pub victim: NodeId,
    pub addr: SimAddress,
    pub station: NodeId,
    pub personal_info: String,
    pub first_seen: f64,
    pub last_seen: f64,
    /// Most urgent priority seen so far.
    pub priority: u8,
    pub messages: Vec<String>,
    pub duplicates: u32,
    pub replies: Vec<ReplyRecord>,
    /// Seconds since the latest SOS.
    pub wait_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapshotNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub mode: NodeMode,
    pub battery: f64,
    pub anchor: Option<Position>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopologySnapshot {
    pub seq: u64,
    pub t: f64,
    pub nodes: Vec<SnapshotNode>,
    /// Symmetric links, each listed once with the smaller id first.
    pub edges: Vec<(NodeId, NodeId)>,
    pub routes_to_station: BTreeMap<NodeId, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplyOutcome {
    pub id: String,
    /// The token was seen before; no new message was sent.
    pub duplicate: bool,
}

#[derive(Debug, Default)]
pub struct StationService {
    inbox: Vec<InboxEntry>,
    victims: BTreeMap<NodeId, VictimRecord>,
    seen: BTreeMap<String, u32>,
    photos: BTreeMap<String, Vec<u8>>,
    reply_tokens: BTreeMap<String, String>,
    traces: Vec<Vec<NodeId>>,
    snapshot_seq: u64,
}

impl StationService {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records messages delivered at station nodes. Repeated ids only bump
    /// the duplicate counter.
    pub fn ingest(&mut self, snap: &WorldSnapshot, deliveries: &[Delivery]) {
        for d in deliveries {
            let at_station = snap
                .nodes
                .get(&d.node)
                .is_some_and(|n| n.kind == NodeKind::Station);
            if !at_station || d.msg.kind != MessageKind::Sos {
                continue;
            }
            let m = &d.msg;
            let victim = m.originator();
            let t = d.at.as_secs_f64();
            if let Some(count) = self.seen.get_mut(&m.id) {
                *count += 1;
                if let Some(v) = victim.as_ref().and_then(|v| self.victims.get_mut(v)) {
                    v.duplicates += 1;
                }
                continue;
            }
            self.seen.insert(m.id.clone(), 0);
            let mut path = m.trace.clone();
            path.push(d.node.clone());
            self.traces.push(path);
            let photo_sha256 = m.photo.as_ref().map(|p| {
                let h = hex::encode(Sha256::digest(p));
                self.photos.insert(h.clone(), p.clone());
                h
            });
            self.inbox.push(InboxEntry {
                seq: self.inbox.len() as u64 + 1,
                received_at: t,
                station: d.node.clone(),
                id: m.id.clone(),
                kind: m.kind.as_str(),
                priority: m.priority.level(),
                origin: m.origin,
                victim: victim.clone(),
                personal_info: m.personal_info.clone(),
                body: m.body.clone(),
                photo_sha256,
                photo_bytes: m.photo.as_ref().map_or(0, Vec::len),
                hops: m.trace.len(),
                trace: m.trace.clone(),
            });
            let Some(victim) = victim else { continue };
            let rec = self
                .victims
                .entry(victim.clone())
                .or_insert_with(|| VictimRecord {
                    victim: victim.clone(),
                    addr: m.origin,
                    station: d.node.clone(),
                    personal_info: m.personal_info.clone(),
                    first_seen: t,
                    last_seen: t,
                    priority: m.priority.level(),
                    messages: Vec::new(),
                    duplicates: 0,
                    replies: Vec::new(),
                    wait_time: 0.0,
                });
            rec.last_seen = t;
            rec.priority = rec.priority.min(m.priority.level());
            rec.messages.push(m.id.clone());
            if !m.personal_info.is_empty() {
                rec.personal_info = m.personal_info.clone();
            }
        }
    }

    pub fn messages_since(&self, since: u64) -> &[InboxEntry] {
        let start = self.inbox.partition_point(|e| e.seq <= since);
        &self.inbox[start..]
    }

    pub fn victims(&self, now: SimTime) -> Vec<VictimRecord> {
        self.victims
            .values()
            .map(|v| {
                let mut v = v.clone();
                v.wait_time = (now.as_secs_f64() - v.last_seen).max(0.0);
                v
            })
            .collect()
    }

    pub fn victim(&self, id: &NodeId) -> Option<&VictimRecord> {
        self.victims.get(id)
    }

    pub fn photo(&self, sha256: &str) -> Option<&[u8]> {
        self.photos.get(sha256).map(Vec::as_slice)
    }

    pub fn duplicate_count(&self, id: &str) -> Option<u32> {
        self.seen.get(id).copied()
    }

    /// Topology as the stations see it. Nodes outside every station's
    /// routing view are omitted.
    pub fn snapshot(&mut self, snap: &WorldSnapshot) -> TopologySnapshot {
        self.snapshot_seq += 1;
        let view = olsr_view(snap);
        let mut routes_to_station: BTreeMap<NodeId, u32> = BTreeMap::new();
        for (st, s) in &snap.stations {
            routes_to_station.entry(st.clone()).or_insert(0);
            for (d, r) in s.routing_table() {
                let e = routes_to_station.entry(d.clone()).or_insert(r.hop_count);
                *e = (*e).min(r.hop_count);
            }
        }
        let nodes = snap
            .nodes
            .values()
            .filter(|n| routes_to_station.contains_key(&n.id) || view.nodes().any(|v| *v == n.id))
            .map(|n| SnapshotNode {
                id: n.id.clone(),
                kind: n.kind,
                mode: n.mode,
                battery: n.battery,
                anchor: n.anchor.as_ref().map(|a| a.position),
            })
            .collect();
        TopologySnapshot {
            seq: self.snapshot_seq,
            t: snap.t.as_secs_f64(),
            nodes,
            edges: view.edges(),
            routes_to_station,
        }
    }

    /// Graph used for position estimates: the stations' routing view plus
    /// the paths recorded in received messages.
    pub fn view(&self, snap: &WorldSnapshot) -> TopologyView {
        let mut view = olsr_view(snap);
        for path in &self.traces {
            view.add_path(path);
        }
        view
    }

    pub fn estimate(&self, snap: &WorldSnapshot, victim: &NodeId) -> Option<PositionEstimate> {
        let anchors = snap
            .nodes
            .values()
            .filter_map(|n| n.anchor.clone().map(|a| (n.id.clone(), a)))
            .collect();
        estimate_position(&self.view(snap), &anchors, victim, snap.r_max)
    }
}

/// Neighbor, two-hop and topology tables of every station.
pub fn olsr_view(snap: &WorldSnapshot) -> TopologyView {
    let mut view = TopologyView::new();
    for (id, s) in &snap.stations {
        for n in s.symmetric_neighbors() {
            view.add_edge(id, &n);
        }
        for (n, reach) in s.two_hop() {
            if s.is_symmetric(n) {
                for r in reach {
                    view.add_edge(n, r);
                }
            }
        }
        for (dest, last) in s.topology().keys() {
            view.add_edge(last, dest);
        }
    }
    view
}

/// World plus station service, driven together.
pub struct Session {
    world: World,
    service: StationService,
    delivered_seen: usize,
}

impl Session {
    pub fn new(world: World) -> Self {
        Session {
            world,
            service: StationService::new(),
            delivered_seen: 0,
        }
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn service(&self) -> &StationService {
        &self.service
    }

    fn sync(&mut self) {
        let new = &self.world.deliveries()[self.delivered_seen..];
        if !new.is_empty() {
            let snap = self.world.snapshot();
            self.service.ingest(&snap, new);
            self.delivered_seen = self.world.deliveries().len();
        }
    }

    pub fn step(&mut self) -> usize {
        let n = self.world.step().len();
        self.sync();
        n
    }

    pub fn run_until(&mut self, t: SimTime) {
        while self.world.next_event_time().is_some_and(|e| e < t) {
            self.step();
        }
        self.world.run_until(t);
        self.sync();
    }

    pub fn events_since(&self, idx: usize) -> &[LogRecord] {
        let log = self.world.log();
        &log[idx.min(log.len())..]
    }

    pub fn topology(&mut self) -> TopologySnapshot {
        let snap = self.world.snapshot();
        self.service.snapshot(&snap)
    }

    pub fn victims(&self) -> Vec<VictimRecord> {
        self.service.victims(self.world.clock())
    }

    pub fn estimate(&self, victim: &NodeId) -> Option<PositionEstimate> {
        self.service.estimate(&self.world.snapshot(), victim)
    }

    /// Sends a priority-0 reply to a victim. Reusing a token returns the
    /// earlier reply without sending again.
    pub fn reply(
        &mut self,
        victim: &NodeId,
        text: &str,
        token: Option<&str>,
    ) -> Result<ReplyOutcome, StationError> {
        if let Some(id) = token.and_then(|t| self.service.reply_tokens.get(t)) {
            return Ok(ReplyOutcome {
                id: id.clone(),
                duplicate: true,
            });
        }
        if text.trim().is_empty() {
            return Err(StationError::EmptyReply);
        }
        let rec = self
            .service
            .victims
            .get(victim)
            .ok_or_else(|| StationError::UnknownVictim(victim.to_string()))?;
        let (station, addr) = (rec.station.clone(), rec.addr);
        let id = self.world.inject_reply(&station, addr, text)?;
        let rec = self.service.victims.get_mut(victim).expect("victim exists");
        rec.replies.push(ReplyRecord {
            id: id.clone(),
            text: text.to_string(),
            sent_at: self.world.clock().as_secs_f64(),
        });
        if let Some(t) = token {
            self.service.reply_tokens.insert(t.to_string(), id.clone());
        }
        Ok(ReplyOutcome {
            id,
            duplicate: false,
        })
    }

    /// Operator-injected scenario event, applied one millisecond from now.
    pub fn operator_event(&mut self, action: ScenarioAction) -> Result<SimTime, StationError> {
        if let ScenarioAction::KillNode { node } = &action {
            if self
                .world
                .node(node)
                .is_some_and(|n| n.kind == NodeKind::Station)
            {
                return Err(StationError::Forbidden(format!(
                    "refusing to kill station {node}"
                )));
            }
        }
        if let ScenarioAction::PartialCrash { nodes } = &action {
            if let Some(st) = nodes.iter().find(|n| {
                self.world
                    .node(n)
                    .is_some_and(|x| x.kind == NodeKind::Station)
            }) {
                return Err(StationError::Forbidden(format!(
                    "refusing to kill station {st}"
                )));
            }
        }
        let at = self.world.clock() + SimTime::from_millis(1);
        self.world.schedule_action(at, action)?;
        Ok(at)
    }

    /// Raw bytes arriving at `node` from outside the simulation.
    pub fn inject_frame(&mut self, node: &NodeId, bytes: Vec<u8>) -> Result<(), StationError> {
        self.world.inject_frame(node, node, bytes)?;
        Ok(())
    }

    pub fn into_world(self) -> World {
        self.world
    }
}
