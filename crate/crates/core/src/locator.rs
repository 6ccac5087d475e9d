//! Victim position locating: the passive N-hop "WHERE AM I?" query, active
//! location advertisement on topology change, and the station-side
//! estimate from anchored routers.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::frame::{EmergencyMessage, LocationBody, MessageKind, Priority};
use crate::ids::{NodeId, SimAddress, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocatorParams {
    pub n_hops: u32,
    pub query_timeout: SimTime,
    pub dedup_window: SimTime,
}

impl Default for LocatorParams {
    fn default() -> Self {
        LocatorParams {
            n_hops: 3,
            query_timeout: SimTime::from_secs(10),
            dedup_window: SimTime::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSource {
    Preinstalled,
    RescuerDeployed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchoredLocation {
    pub node: NodeId,
    pub position: Position,
    pub source: AnchorSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionEstimate {
    pub victim: NodeId,
    pub anchor: NodeId,
    pub anchor_position: Position,
    pub hop_distance: u32,
    /// `hop_distance × R_max`, in meters.
    pub radius_bound: f64,
    pub centroid: Option<Position>,
}

impl PositionEstimate {
    pub fn contains(&self, p: &Position) -> bool {
        self.anchor_position.distance(p) <= self.radius_bound + 1e-9
    }
}

/// Undirected adjacency used for hop-distance estimation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TopologyView {
    adj: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl TopologyView {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_edge(&mut self, a: &NodeId, b: &NodeId) {
        if a == b {
            return;
        }
        self.adj.entry(a.clone()).or_default().insert(b.clone());
        self.adj.entry(b.clone()).or_default().insert(a.clone());
    }

    /// Adds consecutive pairs of a recorded hop trace.
    pub fn add_path(&mut self, path: &[NodeId]) {
        for w in path.windows(2) {
            self.add_edge(&w[0], &w[1]);
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.adj.keys()
    }

    /// Sorted `(low, high)` pairs.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.adj
            .iter()
            .flat_map(|(a, ns)| {
                ns.iter()
                    .filter(move |b| a < *b)
                    .map(move |b| (a.clone(), b.clone()))
            })
            .collect()
    }

    pub fn hop_distances(&self, from: &NodeId) -> BTreeMap<NodeId, u32> {
        let mut dist = BTreeMap::new();
        dist.insert(from.clone(), 0);
        let mut q = VecDeque::from([from.clone()]);
        while let Some(u) = q.pop_front() {
            let d = dist[&u];
            for v in self.adj.get(&u).into_iter().flatten() {
                if !dist.contains_key(v) {
                    dist.insert(v.clone(), d + 1);
                    q.push_back(v.clone());
                }
            }
        }
        dist
    }
}

/// Nearest-anchor disk for `victim`, plus an inverse-hop weighted centroid
/// when at least three anchors are reachable. `None` when no anchor is.
pub fn estimate_position(
    view: &TopologyView,
    anchors: &BTreeMap<NodeId, AnchoredLocation>,
    victim: &NodeId,
    r_max: f64,
) -> Option<PositionEstimate> {
    let dist = view.hop_distances(victim);
    let reachable: Vec<(&AnchoredLocation, u32)> = anchors
        .values()
        .filter_map(|a| dist.get(&a.node).filter(|h| **h > 0).map(|h| (a, *h)))
        .collect();
    let (nearest, h) = reachable
        .iter()
        .min_by(|(a, ha), (b, hb)| ha.cmp(hb).then(a.node.cmp(&b.node)))?;
    let centroid = (reachable.len() >= 3).then(|| {
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for (a, h) in &reachable {
            let w = 1.0 / *h as f64;
            sx += a.position.x * w;
            sy += a.position.y * w;
            sw += w;
        }
        Position::new(sx / sw, sy / sw)
    });
    Some(PositionEstimate {
        victim: victim.clone(),
        anchor: nearest.node.clone(),
        anchor_position: nearest.position,
        hop_distance: *h,
        radius_bound: *h as f64 * r_max,
        centroid,
    })
}

/// Location learned by a device from a LOCREPLY or LOCADVERT.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnedLocation {
    pub anchor: NodeId,
    pub position: Position,
    pub hops: u32,
    pub at: SimTime,
}

pub fn whereami_frame(id: String, origin: SimAddress, n_hops: u32) -> EmergencyMessage {
    EmergencyMessage {
        id,
        kind: MessageKind::WhereAmI,
        priority: Priority::HIGHEST,
        origin,
        dest: SimAddress::BROADCAST,
        source_load: 0,
        personal_info: String::new(),
        body: LocationBody {
            x: None,
            y: None,
            hops: n_hops,
            route: Vec::new(),
            query: None,
        }
        .encode(),
        photo: None,
        trace: Vec::new(),
        swap_count: 0,
    }
}

/// Reply to a received WHEREAMI, source-routed along the reverse of its
/// trace.
pub fn locreply_frame(
    id: String,
    anchor: &AnchoredLocation,
    anchor_addr: SimAddress,
    query: &EmergencyMessage,
) -> EmergencyMessage {
    let route: Vec<NodeId> = query.trace.iter().rev().cloned().collect();
    EmergencyMessage {
        id,
        kind: MessageKind::LocReply,
        priority: Priority::HIGHEST,
        origin: anchor_addr,
        dest: query.origin,
        source_load: 0,
        personal_info: String::new(),
        body: LocationBody {
            x: Some(anchor.position.x),
            y: Some(anchor.position.y),
            hops: query.trace.len() as u32,
            route,
            query: Some(query.id.clone()),
        }
        .encode(),
        photo: None,
        trace: Vec::new(),
        swap_count: 0,
    }
}

pub fn locadvert_frame(
    id: String,
    anchor: &AnchoredLocation,
    anchor_addr: SimAddress,
    to: SimAddress,
    hops: u32,
) -> EmergencyMessage {
    EmergencyMessage {
        id,
        kind: MessageKind::LocAdvert,
        priority: Priority::HIGHEST,
        origin: anchor_addr,
        dest: to,
        source_load: 0,
        personal_info: String::new(),
        body: LocationBody {
            x: Some(anchor.position.x),
            y: Some(anchor.position.y),
            hops,
            route: Vec::new(),
            query: None,
        }
        .encode(),
        photo: None,
        trace: Vec::new(),
        swap_count: 0,
    }
}

/// Next hop for a LOCREPLY at `here`: the entry after `here` in the
/// reverse route, or the first entry when `here` is the replying anchor.
/// `None` once the reply reached the end of its route.
pub fn locreply_next_hop(here: &NodeId, route: &[NodeId]) -> Option<NodeId> {
    match route.iter().position(|n| n == here) {
        Some(i) => route.get(i + 1).cloned(),
        None => route.first().cloned(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhereAmIAction {
    pub reply: bool,
    pub relay: bool,
}

/// Per-node state of the two locating protocols.
#[derive(Debug, Clone, Default)]
pub struct LocatorState {
    seen_queries: VecDeque<String>,
    last_advert: BTreeMap<NodeId, SimTime>,
    /// Joined devices whose advert could not be delivered yet.
    pending_adverts: BTreeSet<NodeId>,
    pub learned: Vec<LearnedLocation>,
    pub queries: BTreeMap<String, QueryState>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryState {
    pub issued_at: SimTime,
    pub n_hops: u32,
    pub replies: Vec<LearnedLocation>,
}

const SEEN_QUERIES: usize = 64;

impl LocatorState {
    /// Decides what a node does with an incoming WHEREAMI. Each query is
    /// handled once; anchors reply and every node keeps relaying until
    /// the hop limit.
    pub fn on_whereami(
        &mut self,
        self_id: &NodeId,
        anchored: bool,
        query: &EmergencyMessage,
    ) -> WhereAmIAction {
        let origin_is_self = query.trace.first() == Some(self_id);
        if origin_is_self || self.seen_queries.contains(&query.id) {
            return WhereAmIAction {
                reply: false,
                relay: false,
            };
        }
        self.seen_queries.push_back(query.id.clone());
        while self.seen_queries.len() > SEEN_QUERIES {
            self.seen_queries.pop_front();
        }
        let limit = LocationBody::decode(&query.body).map_or(0, |b| b.hops);
        WhereAmIAction {
            reply: anchored,
            relay: (query.trace.len() as u32) < limit,
        }
    }

    pub fn begin_query(&mut self, id: String, n_hops: u32, now: SimTime) {
        self.seen_queries.push_back(id.clone());
        self.queries.insert(
            id,
            QueryState {
                issued_at: now,
                n_hops,
                replies: Vec::new(),
            },
        );
    }

    /// Records a LOCREPLY that reached its requester. Replies after the
    /// timeout are dropped.
    pub fn on_locreply(&mut self, query_id: &str, loc: LearnedLocation, timeout: SimTime) -> bool {
        match self.queries.get_mut(query_id) {
            Some(q) if loc.at <= q.issued_at + timeout => {
                q.replies.push(loc);
                true
            }
            _ => false,
        }
    }

    /// Devices newly present in the topology that should get an advert now,
    /// including earlier undelivered ones. Re-joins inside the dedup window
    /// are suppressed.
    pub fn adverts_due(
        &mut self,
        joined: &BTreeSet<NodeId>,
        now: SimTime,
        window: SimTime,
    ) -> Vec<NodeId> {
        let mut due: BTreeSet<NodeId> = std::mem::take(&mut self.pending_adverts);
        for n in joined {
            let recent = self
                .last_advert
                .get(n)
                .is_some_and(|t| now.saturating_sub(*t) < window);
            if !recent {
                due.insert(n.clone());
            }
        }
        due.into_iter().collect()
    }

    pub fn advert_sent(&mut self, to: &NodeId, now: SimTime) {
        self.last_advert.insert(to.clone(), now);
    }

    pub fn advert_failed(&mut self, to: &NodeId) {
        self.pending_adverts.insert(to.clone());
    }

    /// Nearest anchor known to this device: fewest hops, then lowest id.
    pub fn nearest_known(&self) -> Option<&LearnedLocation> {
        self.learned
            .iter()
            .min_by(|a, b| a.hops.cmp(&b.hops).then(a.anchor.cmp(&b.anchor)))
    }
}
