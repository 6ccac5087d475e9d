//! Per-node OLSR engine: HELLO/TC generation and processing, multipoint
//! relay election and shortest-hop routing.
//!
//! Every operation is a deterministic function of the node's state, the
//! incoming message and the clock. Nodes never share state; the simulator
//! carries messages between them.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::ids::{NodeId, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OlsrParams {
    pub hello_interval: SimTime,
    pub tc_interval: SimTime,
    pub neighb_hold: SimTime,
    pub top_hold: SimTime,
    pub tc_ttl: u8,
    /// Number of (originator, ansn) pairs remembered for duplicate detection.
    pub dup_window: usize,
}

impl Default for OlsrParams {
    fn default() -> Self {
        OlsrParams {
            hello_interval: SimTime::from_secs(2),
            tc_interval: SimTime::from_secs(5),
            neighb_hold: SimTime::from_secs(6),
            top_hold: SimTime::from_secs(15),
            tc_ttl: 16,
            dup_window: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LinkStatus {
    Sym,
    Asym,
}

/// Link code advertised in a HELLO listing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LinkCode {
    Sym,
    Asym,
    Mpr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NeighborTuple {
    pub status: LinkStatus,
    pub expires: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TopologyTuple {
    pub ansn: u16,
    pub expires: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub next_hop: NodeId,
    pub hop_count: u32,
}

pub type RoutingTable = BTreeMap<NodeId, Route>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelloMessage {
    pub originator: NodeId,
    pub listed: Vec<(NodeId, LinkCode)>,
    pub seq: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcMessage {
    pub originator: NodeId,
    pub ansn: u16,
    pub advertised: BTreeSet<NodeId>,
    pub ttl_hops: u8,
}

#[derive(Debug, Clone)]
struct SeenTc {
    originator: NodeId,
    ansn: u16,
    forwarded: bool,
}

/// `a` is strictly newer than `b` under 16-bit serial-number arithmetic.
fn ansn_newer(a: u16, b: u16) -> bool {
    a != b && a.wrapping_sub(b) < 0x8000
}

/// One node's complete OLSR view.
#[derive(Debug, Clone)]
pub struct NodeProtocolState {
    id: NodeId,
    params: OlsrParams,
    neighbors: BTreeMap<NodeId, NeighborTuple>,
    two_hop: BTreeMap<NodeId, BTreeSet<NodeId>>,
    mpr_set: BTreeSet<NodeId>,
    mpr_selectors: BTreeMap<NodeId, SimTime>,
    /// Keyed by (dest, last_hop).
    topology: BTreeMap<(NodeId, NodeId), TopologyTuple>,
    latest_ansn: BTreeMap<NodeId, (u16, SimTime)>,
    routing_table: RoutingTable,
    hello_seq: u32,
    ansn: u16,
    seen: VecDeque<SeenTc>,
}

impl NodeProtocolState {
    pub fn new(id: NodeId, params: OlsrParams) -> Self {
        NodeProtocolState {
            id,
            params,
            neighbors: BTreeMap::new(),
            two_hop: BTreeMap::new(),
            mpr_set: BTreeSet::new(),
            mpr_selectors: BTreeMap::new(),
            topology: BTreeMap::new(),
            latest_ansn: BTreeMap::new(),
            routing_table: BTreeMap::new(),
            hello_seq: 0,
            ansn: 0,
            seen: VecDeque::new(),
        }
    }

    pub fn id(&self) -> &NodeId {
        &self.id
    }

    pub fn params(&self) -> &OlsrParams {
        &self.params
    }

    pub fn neighbors(&self) -> &BTreeMap<NodeId, NeighborTuple> {
        &self.neighbors
    }

    pub fn symmetric_neighbors(&self) -> BTreeSet<NodeId> {
        self.neighbors
            .iter()
            .filter(|(_, t)| t.status == LinkStatus::Sym)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn is_symmetric(&self, n: &NodeId) -> bool {
        self.neighbors
            .get(n)
            .is_some_and(|t| t.status == LinkStatus::Sym)
    }

    pub fn two_hop(&self) -> &BTreeMap<NodeId, BTreeSet<NodeId>> {
        &self.two_hop
    }

    pub fn mpr_set(&self) -> &BTreeSet<NodeId> {
        &self.mpr_set
    }

    pub fn mpr_selectors(&self) -> &BTreeMap<NodeId, SimTime> {
        &self.mpr_selectors
    }

    pub fn topology(&self) -> &BTreeMap<(NodeId, NodeId), TopologyTuple> {
        &self.topology
    }

    pub fn routing_table(&self) -> &RoutingTable {
        &self.routing_table
    }

    pub fn next_hop(&self, dest: &NodeId) -> Option<&NodeId> {
        self.routing_table.get(dest).map(|r| &r.next_hop)
    }

    /// Strict 2-hop neighbors: reachable through a symmetric neighbor,
    /// neither self nor a symmetric neighbor.
    pub fn strict_two_hop(&self) -> BTreeSet<NodeId> {
        let sym = self.symmetric_neighbors();
        self.two_hop
            .iter()
            .filter(|(n, _)| sym.contains(*n))
            .flat_map(|(_, s)| s.iter())
            .filter(|d| **d != self.id && !sym.contains(*d))
            .cloned()
            .collect()
    }

    pub fn generate_hello(&mut self, _now: SimTime) -> HelloMessage {
        self.hello_seq = self.hello_seq.wrapping_add(1);
        let listed = self
            .neighbors
            .iter()
            .map(|(n, t)| {
                let code = if self.mpr_set.contains(n) {
                    LinkCode::Mpr
                } else if t.status == LinkStatus::Sym {
                    LinkCode::Sym
                } else {
                    LinkCode::Asym
                };
                (n.clone(), code)
            })
            .collect();
        HelloMessage {
            originator: self.id.clone(),
            listed,
            seq: self.hello_seq,
        }
    }

    pub fn handle_hello(&mut self, msg: &HelloMessage, now: SimTime) {
        if msg.originator == self.id {
            return;
        }
        let our_code = msg
            .listed
            .iter()
            .find(|(n, _)| *n == self.id)
            .map(|(_, c)| *c);
        let status = if our_code.is_some() {
            LinkStatus::Sym
        } else {
            LinkStatus::Asym
        };
        let from = msg.originator.clone();
        self.neighbors.insert(
            from.clone(),
            NeighborTuple {
                status,
                expires: now + self.params.neighb_hold,
            },
        );
        if status == LinkStatus::Sym {
            let reach = msg
                .listed
                .iter()
                .filter(|(n, c)| *n != self.id && matches!(c, LinkCode::Sym | LinkCode::Mpr))
                .map(|(n, _)| n.clone())
                .collect();
            self.two_hop.insert(from.clone(), reach);
        } else {
            self.two_hop.remove(&from);
        }
        if our_code == Some(LinkCode::Mpr) {
            self.mpr_selectors
                .insert(from, now + self.params.neighb_hold);
        } else {
            self.mpr_selectors.remove(&from);
        }
        self.recompute();
    }

    /// `None` while no neighbor has elected this node as relay.
    pub fn generate_tc(&mut self) -> Option<TcMessage> {
        if self.mpr_selectors.is_empty() {
            return None;
        }
        self.ansn = self.ansn.wrapping_add(1);
        Some(TcMessage {
            originator: self.id.clone(),
            ansn: self.ansn,
            advertised: self.mpr_selectors.keys().cloned().collect(),
            ttl_hops: self.params.tc_ttl,
        })
    }

    /// Processes a TC relayed by `forwarder`. Returns whether this node must
    /// retransmit it.
    ///
    /// A message is retransmitted at most once, and only when it arrives from
    /// a node that elected us as relay. A copy first heard from a non-selector
    /// does not prevent a later retransmission when the selector's copy
    /// arrives.
    pub fn handle_tc(&mut self, msg: &TcMessage, forwarder: &NodeId, now: SimTime) -> bool {
        if msg.originator == self.id || !self.is_symmetric(forwarder) {
            return false;
        }
        let seen_idx = self
            .seen
            .iter()
            .position(|s| s.originator == msg.originator && s.ansn == msg.ansn);
        let idx = match seen_idx {
            Some(i) => i,
            None => {
                if let Some((latest, _)) = self.latest_ansn.get(&msg.originator) {
                    if !ansn_newer(msg.ansn, *latest) {
                        // Stale, or a duplicate that already left the window.
                        return false;
                    }
                }
                self.apply_tc(msg, now);
                self.seen.push_back(SeenTc {
                    originator: msg.originator.clone(),
                    ansn: msg.ansn,
                    forwarded: false,
                });
                while self.seen.len() > self.params.dup_window.max(1) {
                    self.seen.pop_front();
                }
                self.seen.len() - 1
            }
        };
        let entry = &mut self.seen[idx];
        let forward =
            !entry.forwarded && msg.ttl_hops > 1 && self.mpr_selectors.contains_key(forwarder);
        if forward {
            entry.forwarded = true;
        }
        forward
    }

    fn apply_tc(&mut self, msg: &TcMessage, now: SimTime) {
        let expires = now + self.params.top_hold;
        self.latest_ansn
            .insert(msg.originator.clone(), (msg.ansn, expires));
        self.topology.retain(|(_, last), _| *last != msg.originator);
        for d in &msg.advertised {
            self.topology.insert(
                (d.clone(), msg.originator.clone()),
                TopologyTuple {
                    ansn: msg.ansn,
                    expires,
                },
            );
        }
        self.routing_table = self.compute_routes();
    }

    /// Drops every entry whose hold time has elapsed. Returns whether
    /// anything was removed.
    pub fn expire_state(&mut self, now: SimTime) -> bool {
        let before = (
            self.neighbors.len(),
            self.two_hop.len(),
            self.mpr_selectors.len(),
            self.topology.len(),
        );
        self.neighbors.retain(|_, t| t.expires > now);
        let neighbors = &self.neighbors;
        self.two_hop.retain(|n, _| {
            neighbors
                .get(n)
                .is_some_and(|t| t.status == LinkStatus::Sym)
        });
        self.mpr_selectors.retain(|_, e| *e > now);
        self.topology.retain(|_, t| t.expires > now);
        self.latest_ansn.retain(|_, (_, e)| *e > now);
        let after = (
            self.neighbors.len(),
            self.two_hop.len(),
            self.mpr_selectors.len(),
            self.topology.len(),
        );
        let changed = before != after;
        if changed {
            self.recompute();
        }
        changed
    }

    fn recompute(&mut self) {
        self.mpr_set = select_mprs(&self.symmetric_neighbors(), &self.two_hop);
        self.routing_table = self.compute_routes();
    }

    /// Breadth-first shortest-hop routes over symmetric neighbor links,
    /// 2-hop links and topology links (last hop to destination). Among
    /// equal-length paths the lowest next hop wins.
    pub fn compute_routes(&self) -> RoutingTable {
        let mut adj: BTreeMap<&NodeId, BTreeSet<&NodeId>> = BTreeMap::new();
        for (n, reach) in &self.two_hop {
            adj.entry(n).or_default().extend(reach.iter());
        }
        for (dest, last) in self.topology.keys() {
            adj.entry(last).or_default().insert(dest);
        }

        let mut table: RoutingTable = BTreeMap::new();
        let mut frontier: BTreeSet<NodeId> = BTreeSet::new();
        for n in self.symmetric_neighbors() {
            table.insert(
                n.clone(),
                Route {
                    next_hop: n.clone(),
                    hop_count: 1,
                },
            );
            frontier.insert(n);
        }
        let mut depth = 1;
        while !frontier.is_empty() {
            depth += 1;
            let mut next: BTreeMap<NodeId, NodeId> = BTreeMap::new();
            for u in &frontier {
                let via = table[u].next_hop.clone();
                let Some(out) = adj.get(u) else { continue };
                for v in out {
                    if **v == self.id || table.contains_key(*v) {
                        continue;
                    }
                    next.entry((*v).clone())
                        .and_modify(|nh| {
                            if via < *nh {
                                *nh = via.clone();
                            }
                        })
                        .or_insert_with(|| via.clone());
                }
            }
            frontier = next.keys().cloned().collect();
            for (v, nh) in next {
                table.insert(
                    v,
                    Route {
                        next_hop: nh,
                        hop_count: depth,
                    },
                );
            }
        }
        table
    }

    /// Checks the structural invariants of this node's sets.
    pub fn check_invariants(&self) -> Result<(), String> {
        let sym = self.symmetric_neighbors();
        if let Some(m) = self.mpr_set.iter().find(|m| !sym.contains(*m)) {
            return Err(format!(
                "{}: MPR {} is not a symmetric neighbor",
                self.id, m
            ));
        }
        for d in self.strict_two_hop() {
            let covered = self
                .mpr_set
                .iter()
                .any(|m| self.two_hop.get(m).is_some_and(|s| s.contains(&d)));
            if !covered {
                return Err(format!("{}: 2-hop {} not covered", self.id, d));
            }
        }
        if self.routing_table.contains_key(&self.id) {
            return Err(format!("{}: route to self", self.id));
        }
        for (d, r) in &self.routing_table {
            if !sym.contains(&r.next_hop) {
                return Err(format!(
                    "{}: route to {} via non-neighbor {}",
                    self.id, d, r.next_hop
                ));
            }
        }
        Ok(())
    }

    /// Structured dump of every set, used by the `inspect` command.
    pub fn dump(&self) -> serde_json::Value {
        let two_hop: BTreeMap<&NodeId, &BTreeSet<NodeId>> = self.two_hop.iter().collect();
        let topology: Vec<_> = self
            .topology
            .iter()
            .map(|((d, l), t)| {
                serde_json::json!({
                    "dest": d, "last_hop": l, "ansn": t.ansn, "expires": t.expires.as_secs_f64()
                })
            })
            .collect();
        let neighbors: BTreeMap<&NodeId, serde_json::Value> = self
            .neighbors
            .iter()
            .map(|(n, t)| {
                (
                    n,
                    serde_json::json!({"status": t.status, "expires": t.expires.as_secs_f64()}),
                )
            })
            .collect();
        let selectors: BTreeMap<&NodeId, f64> = self
            .mpr_selectors
            .iter()
            .map(|(n, e)| (n, e.as_secs_f64()))
            .collect();
        serde_json::json!({
            "node": self.id,
            "neighbors": neighbors,
            "two_hop": two_hop,
            "mpr_set": self.mpr_set,
            "mpr_selectors": selectors,
            "topology": topology,
            "routing_table": self.routing_table,
        })
    }
}

/// Greedy relay election: repeatedly pick the neighbor covering the most
/// still-uncovered strict 2-hop nodes, lowest id on ties.
pub fn select_mprs(
    neighbors: &BTreeSet<NodeId>,
    two_hop: &BTreeMap<NodeId, BTreeSet<NodeId>>,
) -> BTreeSet<NodeId> {
    let reach: BTreeMap<&NodeId, BTreeSet<&NodeId>> = two_hop
        .iter()
        .filter(|(n, _)| neighbors.contains(*n))
        .map(|(n, s)| (n, s.iter().filter(|d| !neighbors.contains(*d)).collect()))
        .collect();
    let mut uncovered: BTreeSet<&NodeId> = reach.values().flatten().copied().collect();
    let mut mprs = BTreeSet::new();
    while !uncovered.is_empty() {
        let mut best: Option<(&NodeId, usize)> = None;
        for (n, s) in &reach {
            if mprs.contains(*n) {
                continue;
            }
            let gain = s.iter().filter(|d| uncovered.contains(*d)).count();
            // BTreeMap iteration is ascending, so strict > keeps the lowest id.
            if gain > 0 && best.is_none_or(|(_, g)| gain > g) {
                best = Some((n, gain));
            }
        }
        let Some((pick, _)) = best else { break };
        for d in &reach[pick] {
            uncovered.remove(d);
        }
        mprs.insert(pick.clone());
    }
    mprs
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn id(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    fn set(ids: &[&str]) -> BTreeSet<NodeId> {
        ids.iter().map(|s| id(s)).collect()
    }

    fn node(s: &str) -> NodeProtocolState {
        NodeProtocolState::new(id(s), OlsrParams::default())
    }

    fn t(s: u64) -> SimTime {
        SimTime::from_secs(s)
    }

    /// Exchanges HELLOs synchronously among the given nodes using an
    /// explicit adjacency list, `rounds` times.
    fn hello_rounds(
        nodes: &mut [NodeProtocolState],
        edges: &[(usize, usize)],
        rounds: usize,
        now: SimTime,
    ) {
        for _ in 0..rounds {
            let hellos: Vec<_> = nodes.iter_mut().map(|n| n.generate_hello(now)).collect();
            for &(a, b) in edges {
                nodes[b].handle_hello(&hellos[a], now);
                nodes[a].handle_hello(&hellos[b], now);
            }
        }
    }

    /// Smallest cover size by exhaustive subset enumeration.
    fn brute_min_cover(
        neighbors: &[NodeId],
        two_hop: &BTreeMap<NodeId, BTreeSet<NodeId>>,
    ) -> usize {
        let nset: BTreeSet<_> = neighbors.iter().cloned().collect();
        let strict: BTreeSet<NodeId> = two_hop
            .values()
            .flatten()
            .filter(|d| !nset.contains(*d))
            .cloned()
            .collect();
        let k = neighbors.len();
        (0u32..1 << k)
            .filter(|mask| {
                strict.iter().all(|d| {
                    (0..k).any(|i| {
                        mask & (1 << i) != 0
                            && two_hop.get(&neighbors[i]).is_some_and(|s| s.contains(d))
                    })
                })
            })
            .map(|m| m.count_ones() as usize)
            .min()
            .unwrap()
    }

    #[test]
    fn hello_from_isolated_node_is_empty() {
        let mut a = node("A");
        let h = a.generate_hello(t(0));
        assert!(h.listed.is_empty());
        assert_eq!(h.seq, 1);
        assert_eq!(a.generate_hello(t(2)).seq, 2);
    }

    #[test]
    fn one_way_hello_gives_asym() {
        let mut a = node("A");
        let mut b = node("B");
        let hb = b.generate_hello(t(0));
        a.handle_hello(&hb, t(0));
        assert_eq!(a.neighbors()[&id("B")].status, LinkStatus::Asym);
        let ha = a.generate_hello(t(0));
        assert_eq!(ha.listed, vec![(id("B"), LinkCode::Asym)]);
    }

    #[test]
    fn handshake_reaches_symmetry() {
        let mut a = node("A");
        let mut b = node("B");
        // A hears B first.
        a.handle_hello(&b.generate_hello(t(0)), t(0));
        // B hears A listing B (ASYM): B now knows the link is bidirectional.
        b.handle_hello(&a.generate_hello(t(0)), t(0));
        assert!(b.is_symmetric(&id("A")));
        // B lists A as SYM; A marks B symmetric.
        let hb = b.generate_hello(t(1));
        assert_eq!(hb.listed, vec![(id("A"), LinkCode::Sym)]);
        a.handle_hello(&hb, t(1));
        assert!(a.is_symmetric(&id("B")));
    }

    #[test]
    fn hello_from_self_ignored() {
        let mut a = node("A");
        let h = a.generate_hello(t(0));
        a.handle_hello(&h, t(0));
        assert!(a.neighbors().is_empty());
    }

    #[test]
    fn line_middle_is_mpr_and_hello_carries_mpr_code() {
        // A - B - C
        let mut nodes = vec![node("A"), node("B"), node("C")];
        hello_rounds(&mut nodes, &[(0, 1), (1, 2)], 3, t(0));
        assert_eq!(nodes[0].mpr_set(), &set(&["B"]));
        let ha = nodes[0].generate_hello(t(1));
        assert_eq!(ha.listed, vec![(id("B"), LinkCode::Mpr)]);
        nodes[1].handle_hello(&ha, t(1));
        assert!(nodes[1].mpr_selectors().contains_key(&id("A")));
    }

    #[test]
    fn mpr_examples() {
        assert!(select_mprs(&set(&["B"]), &BTreeMap::new()).is_empty());

        let mut th = BTreeMap::new();
        th.insert(id("B"), set(&["D"]));
        th.insert(id("C"), set(&["D"]));
        assert_eq!(select_mprs(&set(&["B", "C"]), &th), set(&["B"]));
        assert_eq!(brute_min_cover(&[id("B"), id("C")], &th), 1);

        let mut th = BTreeMap::new();
        th.insert(id("B"), set(&["D"]));
        th.insert(id("C"), set(&["E"]));
        assert_eq!(select_mprs(&set(&["B", "C"]), &th), set(&["B", "C"]));
        assert_eq!(brute_min_cover(&[id("B"), id("C")], &th), 2);
    }

    #[test]
    fn mpr_ignores_two_hop_that_are_neighbors() {
        let mut th = BTreeMap::new();
        th.insert(id("B"), set(&["C"]));
        th.insert(id("C"), set(&["B"]));
        assert!(select_mprs(&set(&["B", "C"]), &th).is_empty());
    }

    #[test]
    fn tc_none_without_selectors() {
        let mut a = node("A");
        assert!(a.generate_tc().is_none());
    }

    #[test]
    fn tc_advertises_selectors_and_drops_expired_ones() {
        let mut nodes = vec![node("A"), node("B"), node("C")];
        hello_rounds(&mut nodes, &[(0, 1), (1, 2)], 4, t(0));
        let tc = nodes[1].generate_tc().unwrap();
        assert_eq!(tc.advertised, set(&["A", "C"]));
        assert_eq!(tc.ansn, 1);
        assert_eq!(tc.ttl_hops, 16);
        // Refresh only A's listing at t=4; C's selector entry dies at t=6.
        let ha = nodes[0].generate_hello(t(4));
        nodes[1].handle_hello(&ha, t(4));
        nodes[1].expire_state(t(7));
        let tc = nodes[1].generate_tc().unwrap();
        assert_eq!(tc.advertised, set(&["A"]));
        assert_eq!(tc.ansn, 2);
    }

    #[test]
    fn tc_from_non_selector_is_stored_not_forwarded() {
        // Star: hub H with leaves A and L. L receives H's TC.
        let mut nodes = vec![node("H"), node("A"), node("L")];
        hello_rounds(&mut nodes, &[(0, 1), (0, 2)], 4, t(0));
        let tc = nodes[0].generate_tc().unwrap();
        let fwd = nodes[2].handle_tc(&tc, &id("H"), t(1));
        assert!(!fwd);
        assert!(nodes[2].topology().contains_key(&(id("A"), id("H"))));
    }

    #[test]
    fn duplicate_tc_is_no_op() {
        // A - B - C - D: B relays for A and C.
        let mut nodes = vec![node("A"), node("B"), node("C"), node("D")];
        hello_rounds(&mut nodes, &[(0, 1), (1, 2), (2, 3)], 4, t(0));
        let tc = nodes[2].generate_tc().unwrap();
        // B receives C's TC via C, and C selected B: B must forward once.
        assert!(nodes[1].handle_tc(&tc, &id("C"), t(1)));
        let snapshot = nodes[1].topology().clone();
        assert!(!nodes[1].handle_tc(&tc, &id("C"), t(1)));
        assert_eq!(nodes[1].topology(), &snapshot);
    }

    #[test]
    fn stale_tc_rejected() {
        let mut nodes = vec![node("A"), node("B"), node("C")];
        hello_rounds(&mut nodes, &[(0, 1), (1, 2)], 4, t(0));
        let old = nodes[1].generate_tc().unwrap();
        let new = nodes[1].generate_tc().unwrap();
        assert!(!nodes[0].handle_tc(&new, &id("B"), t(1)));
        let snap = nodes[0].topology().clone();
        assert!(!nodes[0].handle_tc(&old, &id("B"), t(1)));
        assert_eq!(nodes[0].topology(), &snap);
        assert!(nodes[0].topology().values().all(|tt| tt.ansn == new.ansn));
    }

    #[test]
    fn late_selector_copy_still_forwarded() {
        // X is a symmetric neighbor of B that did not select B; C did.
        let mut b = node("B");
        let now = t(0);
        for (n, code) in [("X", LinkCode::Sym), ("C", LinkCode::Mpr)] {
            b.handle_hello(
                &HelloMessage {
                    originator: id(n),
                    listed: vec![(id("B"), code)],
                    seq: 1,
                },
                now,
            );
        }
        let tc = TcMessage {
            originator: id("Z"),
            ansn: 3,
            advertised: set(&["Y"]),
            ttl_hops: 16,
        };
        assert!(!b.handle_tc(&tc, &id("X"), now));
        assert!(b.handle_tc(&tc, &id("C"), now));
        assert!(!b.handle_tc(&tc, &id("C"), now));
    }

    #[test]
    fn tc_with_ttl_one_not_forwarded() {
        let mut b = node("B");
        b.handle_hello(
            &HelloMessage {
                originator: id("C"),
                listed: vec![(id("B"), LinkCode::Mpr)],
                seq: 1,
            },
            t(0),
        );
        let tc = TcMessage {
            originator: id("Z"),
            ansn: 1,
            advertised: set(&["C"]),
            ttl_hops: 1,
        };
        assert!(!b.handle_tc(&tc, &id("C"), t(0)));
    }

    #[test]
    fn routes_on_isolated_and_line() {
        let a = node("A");
        assert!(a.compute_routes().is_empty());

        let mut nodes = vec![node("A"), node("B"), node("C")];
        hello_rounds(&mut nodes, &[(0, 1), (1, 2)], 3, t(0));
        let rt = nodes[0].routing_table();
        assert_eq!(
            rt[&id("B")],
            Route {
                next_hop: id("B"),
                hop_count: 1
            }
        );
        assert_eq!(
            rt[&id("C")],
            Route {
                next_hop: id("B"),
                hop_count: 2
            }
        );
    }

    #[test]
    fn ring_of_five_has_two_destinations_at_two_hops() {
        let names = ["A", "B", "C", "D", "E"];
        let mut nodes: Vec<_> = names.iter().map(|n| node(n)).collect();
        let edges: Vec<_> = (0..5).map(|i| (i, (i + 1) % 5)).collect();
        hello_rounds(&mut nodes, &edges, 4, t(0));
        let rt = nodes[0].routing_table();
        assert_eq!(rt.len(), 4);
        assert_eq!(rt.values().filter(|r| r.hop_count == 2).count(), 2);
        assert_eq!(rt[&id("C")].next_hop, id("B"));
        assert_eq!(rt[&id("D")].next_hop, id("E"));
    }

    #[test]
    fn equal_paths_pick_lowest_next_hop() {
        // Diamond A-{B,C}-D; both B and C reach D.
        let mut nodes = vec![node("A"), node("C"), node("B"), node("D")];
        hello_rounds(&mut nodes, &[(0, 1), (0, 2), (1, 3), (2, 3)], 3, t(0));
        assert_eq!(nodes[0].routing_table()[&id("D")].next_hop, id("B"));
    }

    #[test]
    fn expiry_removes_neighbor_and_routes_through_it() {
        let mut nodes = vec![node("A"), node("B"), node("C")];
        hello_rounds(&mut nodes, &[(0, 1), (1, 2)], 3, t(0));
        let a = &mut nodes[0];
        assert!(!a.expire_state(t(1)), "nothing due yet");
        assert!(a.expire_state(t(6)));
        assert!(a.neighbors().is_empty());
        assert!(a.mpr_set().is_empty());
        assert!(a.routing_table().is_empty());
    }

    #[test]
    fn topology_expiry_drops_far_routes() {
        // A-B-C-D: A learns D only from C's TC.
        let mut nodes = vec![node("A"), node("B"), node("C"), node("D")];
        hello_rounds(&mut nodes, &[(0, 1), (1, 2), (2, 3)], 4, t(0));
        let tc = nodes[2].generate_tc().unwrap();
        nodes[0].handle_tc(&tc, &id("B"), t(0));
        assert_eq!(nodes[0].routing_table()[&id("D")].hop_count, 3);
        // Keep the neighbor alive while letting the topology tuple expire.
        let hb = nodes[1].generate_hello(t(14));
        nodes[0].handle_hello(&hb, t(14));
        nodes[0].expire_state(t(15));
        assert!(!nodes[0].routing_table().contains_key(&id("D")));
        assert!(nodes[0].routing_table().contains_key(&id("C")));
    }

    #[test]
    fn ansn_wraps() {
        assert!(ansn_newer(1, 0));
        assert!(ansn_newer(0, u16::MAX));
        assert!(!ansn_newer(5, 5));
        assert!(!ansn_newer(4, 5));
    }

    fn arb_cover_input() -> impl Strategy<Value = (Vec<NodeId>, BTreeMap<NodeId, BTreeSet<NodeId>>)>
    {
        (1usize..7).prop_flat_map(|k| {
            proptest::collection::vec(proptest::collection::btree_set(0u8..10, 0..5), k).prop_map(
                move |sets| {
                    let neighbors: Vec<NodeId> = (0..k).map(|i| id(&format!("N{i}"))).collect();
                    let th = neighbors
                        .iter()
                        .cloned()
                        .zip(
                            sets.into_iter()
                                .map(|s| s.into_iter().map(|x| id(&format!("T{x}"))).collect()),
                        )
                        .collect();
                    (neighbors, th)
                },
            )
        })
    }

    proptest! {
        #[test]
        fn greedy_covers_and_is_order_independent((neighbors, th) in arb_cover_input(), seed in any::<u64>()) {
            let nset: BTreeSet<_> = neighbors.iter().cloned().collect();
            let mprs = select_mprs(&nset, &th);
            let strict: BTreeSet<_> = th.values().flatten().cloned().collect();
            for d in &strict {
                prop_assert!(mprs.iter().any(|m| th[m].contains(d)));
            }
            prop_assert!(mprs.len() >= brute_min_cover(&neighbors, &th));

            // Rebuild the inputs in a shuffled insertion order.
            let mut order: Vec<_> = th.iter().collect();
            let n = order.len();
            for i in 0..n {
                let j = (seed.rotate_left(i as u32) as usize) % n;
                order.swap(i, j);
            }
            let shuffled: BTreeMap<_, _> = order.into_iter().map(|(k, v)| (k.clone(), v.clone())).collect();
            prop_assert_eq!(select_mprs(&nset, &shuffled), mprs);
        }
    }
}
