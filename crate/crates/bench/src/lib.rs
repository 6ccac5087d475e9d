//! Workload builders shared by the benchmarks.

use std::collections::{BTreeMap, BTreeSet};

use lifeline_core::sim::random_geometric;
use lifeline_core::{NodeId, World};

/// Neighbor and two-hop sets of the first node of a seeded random graph.
pub fn mpr_input(seed: u64, n: usize) -> (BTreeSet<NodeId>, BTreeMap<NodeId, BTreeSet<NodeId>>) {
    let sc = random_geometric(seed, n, 600.0, 250.0, true);
    let pos: Vec<(NodeId, f64, f64)> = sc.nodes.iter().map(|s| (s.id.clone(), s.x, s.y)).collect();
    let near =
        |i: usize, j: usize| i != j && (pos[i].1 - pos[j].1).hypot(pos[i].2 - pos[j].2) <= 250.0;
    let n1: BTreeSet<NodeId> = (0..pos.len())
        .filter(|&j| near(0, j))
        .map(|j| pos[j].0.clone())
        .collect();
    let two_hop = (0..pos.len())
        .filter(|&j| near(0, j))
        .map(|j| {
            let reach = (0..pos.len())
                .filter(|&k| k != 0 && near(j, k))
                .map(|k| pos[k].0.clone())
                .collect();
            (pos[j].0.clone(), reach)
        })
        .collect();
    (n1, two_hop)
}

/// A converged world of `n` routers.
pub fn converged_world(seed: u64, n: usize) -> World {
    let sc = random_geometric(seed, n, 900.0, 250.0, true);
    let mut w = World::from_scenario(&sc).expect("generated scenario is valid");
    w.run_until(lifeline_core::sim::CONVERGENCE_TIME);
    w
}
