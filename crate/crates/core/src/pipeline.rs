//! Receive → Schedule → Forward pipeline: five FIFO priority queues,
//! retry-with-decrement on unreachable destinations, swapping against
//! secondary storage and the promotion cascade.
//!
//! Queue 0 is the most urgent. A message whose destination cannot be reached
//! has its priority decremented by one, which moves it toward queue 0; a
//! message that fails at queue 0 goes negative and is swapped out.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backup::{battery_gate, GateDecision};
use crate::frame::{EmergencyMessage, Priority};
use crate::ids::{NodeId, SimAddress};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineParams {
    /// A message swapped out more than this many times is archived.
    pub swap_limit: u32,
    pub swap_in_batch: usize,
    /// Successful sends between two promotion cascades.
    pub cascade_every: u32,
    /// Queue capacity used to express load as a percentage.
    pub capacity: usize,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams {
            swap_limit: 2,
            swap_in_batch: 4,
            cascade_every: 8,
            capacity: 64,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PipelineError {
    #[error("message {0} refused: battery too low")]
    RejectedLowBattery(String),
}

pub const QUEUES: usize = Priority::LEVELS;

#[derive(Debug, Clone, Default)]
pub struct QueueBank {
    queues: [VecDeque<EmergencyMessage>; QUEUES],
    sends_since_cascade: u32,
}

impl QueueBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends to the queue matching the message's current priority.
    pub fn enqueue(&mut self, msg: EmergencyMessage) {
        self.queues[msg.priority.index()].push_back(msg);
    }

    pub fn queue(&self, i: usize) -> &VecDeque<EmergencyMessage> {
        &self.queues[i]
    }

    pub fn occupancy(&self) -> [usize; QUEUES] {
        std::array::from_fn(|i| self.queues[i].len())
    }

    pub fn len(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }

    pub fn sends_since_cascade(&self) -> u32 {
        self.sends_since_cascade
    }

    pub fn contains(&self, id: &str) -> bool {
        self.iter().any(|m| m.id == id)
    }

    /// Messages in service order.
    pub fn iter(&self) -> impl Iterator<Item = &EmergencyMessage> {
        self.queues.iter().flatten()
    }

    /// Removes every message, most urgent first.
    pub fn drain_all(&mut self) -> Vec<EmergencyMessage> {
        self.queues.iter_mut().flat_map(|q| q.drain(..)).collect()
    }

    /// Queue occupancy as a percentage of `capacity`, saturating at 100.
    pub fn load_pct(&self, capacity: usize) -> u8 {
        if capacity == 0 {
            return 100;
        }
        ((self.len() * 100 / capacity).min(100)) as u8
    }
}

#[derive(Debug, Clone, Default)]
pub struct SwapStore {
    swapped: VecDeque<EmergencyMessage>,
    archived: Vec<EmergencyMessage>,
}

impl SwapStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn swapped(&self) -> &VecDeque<EmergencyMessage> {
        &self.swapped
    }

    pub fn archived(&self) -> &[EmergencyMessage] {
        &self.archived
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwapOutcome {
    Swapped { swap_count: u32 },
    Archived { swap_count: u32 },
}

/// Moves a message that went below priority 0 to secondary storage.
pub fn swap_out(store: &mut SwapStore, mut msg: EmergencyMessage, swap_limit: u32) -> SwapOutcome {
    msg.swap_count += 1;
    let swap_count = msg.swap_count;
    if swap_count > swap_limit {
        store.archived.push(msg);
        SwapOutcome::Archived { swap_count }
    } else {
        store.swapped.push_back(msg);
        SwapOutcome::Swapped { swap_count }
    }
}

/// Brings swapped messages back into queue 1 once queues 0 and 1 are empty.
/// Returns the ids moved.
pub fn maybe_swap_in(bank: &mut QueueBank, store: &mut SwapStore, batch: usize) -> Vec<String> {
    if !bank.queues[0].is_empty() || !bank.queues[1].is_empty() {
        return Vec::new();
    }
    let n = batch.min(store.swapped.len());
    store
        .swapped
        .drain(..n)
        .map(|mut m| {
            m.priority = Priority::new(1).expect("1 is a valid level");
            let id = m.id.clone();
            bank.queues[1].push_back(m);
            id
        })
        .collect()
}

/// Shifts queues 2, 3 and 4 one level up, in that order, and resets the
/// send counter. Returns the number of messages moved.
pub fn promote_cascade(bank: &mut QueueBank) -> usize {
    let mut moved = 0;
    for i in 2..QUEUES {
        let batch: Vec<_> = bank.queues[i].drain(..).collect();
        moved += batch.len();
        let up = Priority::new(i as u8 - 1).expect("valid level");
        for mut m in batch {
            m.priority = up;
            bank.queues[i - 1].push_back(m);
        }
    }
    bank.sends_since_cascade = 0;
    moved
}

/// Routing lookup and link-layer transmit, supplied by the owning node.
pub trait Link {
    fn next_hop(&self, dest: &SimAddress) -> Option<NodeId>;
    /// Hands the frame to `next_hop`. `false` when the link is gone.
    fn transmit(&mut self, next_hop: &NodeId, msg: &EmergencyMessage) -> bool;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    NoWork,
    Sent {
        id: String,
        queue: usize,
        next_hop: NodeId,
        occupancy: [usize; QUEUES],
        cascaded: bool,
    },
    Requeued {
        id: String,
        from: usize,
        to: usize,
        occupancy: [usize; QUEUES],
    },
    SwappedOut {
        id: String,
        swap_count: u32,
        occupancy: [usize; QUEUES],
    },
    Archived {
        id: String,
        swap_count: u32,
        occupancy: [usize; QUEUES],
    },
}

/// Serves the head of the most urgent non-empty queue.
pub fn forward_step(
    self_id: &NodeId,
    bank: &mut QueueBank,
    store: &mut SwapStore,
    params: &PipelineParams,
    link: &mut dyn Link,
) -> StepOutcome {
    let Some(queue) = (0..QUEUES).find(|&i| !bank.queues[i].is_empty()) else {
        return StepOutcome::NoWork;
    };
    let occupancy = bank.occupancy();
    let mut msg = bank.queues[queue].pop_front().expect("non-empty queue");
    if let Some(next_hop) = link.next_hop(&msg.dest) {
        let mut out = msg.clone();
        out.trace.push(self_id.clone());
        if link.transmit(&next_hop, &out) {
            bank.sends_since_cascade += 1;
            let cascaded = bank.sends_since_cascade >= params.cascade_every;
            if cascaded {
                promote_cascade(bank);
            }
            return StepOutcome::Sent {
                id: msg.id,
                queue,
                next_hop,
                occupancy,
                cascaded,
            };
        }
    }
    let id = msg.id.clone();
    match msg.priority.decrement() {
        Some(p) => {
            msg.priority = p;
            bank.enqueue(msg);
            StepOutcome::Requeued {
                id,
                from: queue,
                to: p.index(),
                occupancy,
            }
        }
        None => match swap_out(store, msg, params.swap_limit) {
            SwapOutcome::Swapped { swap_count } => StepOutcome::SwappedOut {
                id,
                swap_count,
                occupancy,
            },
            SwapOutcome::Archived { swap_count } => StepOutcome::Archived {
                id,
                swap_count,
                occupancy,
            },
        },
    }
}

/// A node's full store-and-forward state.
#[derive(Debug, Clone, Default)]
pub struct Pipeline {
    pub bank: QueueBank,
    pub store: SwapStore,
    pub params: PipelineParams,
}

impl Pipeline {
    pub fn new(params: PipelineParams) -> Self {
        Pipeline {
            bank: QueueBank::new(),
            store: SwapStore::new(),
            params,
        }
    }

    /// Schedule module entry: battery gate, then enqueue.
    pub fn admit(&mut self, msg: EmergencyMessage, battery_pct: f64) -> Result<(), PipelineError> {
        match battery_gate(battery_pct, &msg.id) {
            GateDecision::Accept => {
                self.bank.enqueue(msg);
                Ok(())
            }
            GateDecision::RejectLowBattery => Err(PipelineError::RejectedLowBattery(msg.id)),
        }
    }

    pub fn load_pct(&self) -> u8 {
        self.bank.load_pct(self.params.capacity)
    }

    pub fn step(&mut self, self_id: &NodeId, link: &mut dyn Link) -> StepOutcome {
        forward_step(self_id, &mut self.bank, &mut self.store, &self.params, link)
    }

    pub fn swap_in(&mut self) -> Vec<String> {
        maybe_swap_in(&mut self.bank, &mut self.store, self.params.swap_in_batch)
    }
}
