//! Router-side message backup: the six configurable backup options with
//! tier dominance, the durable per-node backup log, and low-battery
//! behavior (gradual rejection and queue handoff).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{parse_frame, EmergencyMessage, FrameError, MessageKind, Parsed};
use crate::ids::{NodeId, SimAddress};
use crate::pipeline::QueueBank;

#[derive(Debug, Error, PartialEq)]
pub enum BackupError {
    #[error("unknown backup option {0}")]
    UnknownOption(u8),
    #[error("backup option {option} requires a parameter")]
    MissingParam { option: u8 },
    #[error("backup option {option}: parameter {param} outside {range}")]
    ParamRange {
        option: u8,
        param: f64,
        range: &'static str,
    },
    #[error("backup log truncated at byte {0}")]
    Truncated(usize),
    #[error("backup log record at byte {offset}: {source}")]
    Frame { offset: usize, source: FrameError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackupEvent {
    Received,
    Forwarded,
}

/// One configured backup option. Built through [`BackupRule::new`], which
/// enforces the parameter range of each option.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRule", into = "RawRule")]
pub struct BackupRule {
    option: u8,
    pub enabled: bool,
    param: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RawRule {
    option: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    param: Option<f64>,
    #[serde(default = "yes")]
    enabled: bool,
}

fn yes() -> bool {
    true
}

impl TryFrom<RawRule> for BackupRule {
    type Error = BackupError;

    fn try_from(r: RawRule) -> Result<Self, BackupError> {
        let mut rule = BackupRule::new(r.option, r.param)?;
        rule.enabled = r.enabled;
        Ok(rule)
    }
}

impl From<BackupRule> for RawRule {
    fn from(r: BackupRule) -> RawRule {
        RawRule {
            option: r.option,
            param: r.param,
            enabled: r.enabled,
        }
    }
}

impl BackupRule {
    pub fn new(option: u8, param: Option<f64>) -> Result<Self, BackupError> {
        let check =
            |ok: fn(f64) -> bool, range: &'static str| -> Result<Option<f64>, BackupError> {
                let p = param.ok_or(BackupError::MissingParam { option })?;
                if ok(p) {
                    Ok(Some(p))
                } else {
                    Err(BackupError::ParamRange {
                        option,
                        param: p,
                        range,
                    })
                }
            };
        let param = match option {
            1 | 2 => None,
            3 => check(|p| p > 0.0 && p <= 100.0, "(0, 100]")?,
            4 => check(|p| p > 0.0 && p <= 4.0 && p.fract() == 0.0, "{1, 2, 3, 4}")?,
            5 | 6 => check(|p| p > 0.0 && p < 100.0, "(0, 100)")?,
            other => return Err(BackupError::UnknownOption(other)),
        };
        Ok(BackupRule {
            option,
            enabled: true,
            param,
        })
    }

    pub fn option(&self) -> u8 {
        self.option
    }

    pub fn param(&self) -> Option<f64> {
        self.param
    }

    /// Option priority; a lower tier overrides a higher one.
    pub fn tier(&self) -> u8 {
        option_tier(self.option)
    }

    pub fn applies_to(&self, event: BackupEvent) -> bool {
        match self.option {
            1 => event == BackupEvent::Received,
            2 => event == BackupEvent::Forwarded,
            _ => true,
        }
    }

    pub fn fires(&self, ctx: &BackupContext) -> bool {
        let p = self.param.unwrap_or(0.0);
        match self.option {
            1 | 2 => true,
            3 => ctx.battery_pct < p,
            // "Higher" priority means more urgent, i.e. numerically lower.
            4 => (ctx.msg_priority as f64) < p,
            5 => ctx.local_load_pct > p,
            6 => ctx.source_load_pct > p,
            _ => false,
        }
    }
}

pub fn option_tier(option: u8) -> u8 {
    match option {
        1 | 2 => 1,
        3 | 4 => 2,
        _ => 3,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackupContext {
    pub event: BackupEvent,
    pub battery_pct: f64,
    pub local_load_pct: f64,
    pub source_load_pct: f64,
    pub msg_priority: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BackupDecision {
    pub backup: bool,
    pub decided_by: Option<u8>,
}

/// Among enabled rules that apply to the event and whose condition holds,
/// the lowest tier decides (lowest option number within a tier).
pub fn evaluate_backup(rules: &[BackupRule], ctx: &BackupContext) -> BackupDecision {
    let winner = rules
        .iter()
        .filter(|r| r.enabled && r.applies_to(ctx.event) && r.fires(ctx))
        .min_by_key(|r| (r.tier(), r.option));
    BackupDecision {
        backup: winner.is_some(),
        decided_by: winner.map(|r| r.option),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PersistReceipt {
    pub offset: u64,
    pub evicted: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LogEntry {
    offset: u64,
    id: String,
    kind: MessageKind,
    bytes: Vec<u8>,
}

/// Append-only durable store of backed-up frames, capped at `capacity`
/// frames. It is the part of a node that survives a reboot.
///
/// Receipt offsets are positions in the logical append stream and keep
/// growing across evictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackupLog {
    capacity: usize,
    entries: Vec<LogEntry>,
    next_offset: u64,
}

impl BackupLog {
    pub fn new(capacity: usize) -> Self {
        BackupLog {
            capacity: capacity.max(1),
            entries: Vec::new(),
            next_offset: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    /// Writes `msg` before it is sent. When full, the oldest non-SOS frame
    /// is evicted first, then the oldest SOS.
    pub fn persist_backup(&mut self, msg: &EmergencyMessage) -> PersistReceipt {
        let mut evicted = Vec::new();
        while self.entries.len() >= self.capacity {
            let victim = self
                .entries
                .iter()
                .position(|e| e.kind != MessageKind::Sos)
                .unwrap_or(0);
            evicted.push(self.entries.remove(victim).id);
        }
        let bytes = msg.to_bytes();
        let offset = self.next_offset;
        self.next_offset += 4 + bytes.len() as u64;
        self.entries.push(LogEntry {
            offset,
            id: msg.id.clone(),
            kind: msg.kind,
            bytes,
        });
        PersistReceipt { offset, evicted }
    }

    /// Length-prefixed file image: big-endian u32 length, then frame bytes.
    pub fn to_file_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.extend_from_slice(&(e.bytes.len() as u32).to_be_bytes());
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    /// Decodes a file image written by [`BackupLog::to_file_bytes`].
    pub fn recover(bytes: &[u8]) -> Result<Vec<EmergencyMessage>, BackupError> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let len_bytes: [u8; 4] = bytes
                .get(pos..pos + 4)
                .and_then(|s| s.try_into().ok())
                .ok_or(BackupError::Truncated(pos))?;
            let len = u32::from_be_bytes(len_bytes) as usize;
            let frame = bytes
                .get(pos + 4..pos + 4 + len)
                .ok_or(BackupError::Truncated(pos))?;
            match parse_frame(frame) {
                Ok(Parsed::Emergency(m)) => out.push(m),
                Ok(Parsed::NotEmergency) => {
                    return Err(BackupError::Frame {
                        offset: pos,
                        source: FrameError::Syntax("not an EMG frame".into()),
                    })
                }
                Err(source) => {
                    return Err(BackupError::Frame {
                        offset: pos,
                        source,
                    })
                }
            }
            pos += 4 + len;
        }
        Ok(out)
    }

    pub fn messages(&self) -> Vec<EmergencyMessage> {
        Self::recover(&self.to_file_bytes()).expect("log holds only encoded frames")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GateDecision {
    Accept,
    RejectLowBattery,
}

pub const GATE_FULL_ACCEPT_PCT: f64 = 20.0;
pub const GATE_FULL_REJECT_PCT: f64 = 5.0;

/// Stable residue in 0..100 derived from a message id (64-bit FNV-1a).
pub fn gate_residue(id: &str) -> u8 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % 100) as u8
}

/// Admission at a given residue. Between 5% and 20% battery the accepted
/// share ramps linearly from 0 to 100.
pub fn gate_with_residue(battery_pct: f64, residue: u8) -> GateDecision {
    if battery_pct > GATE_FULL_ACCEPT_PCT {
        return GateDecision::Accept;
    }
    if battery_pct <= GATE_FULL_REJECT_PCT {
        return GateDecision::RejectLowBattery;
    }
    let ramp = (battery_pct - GATE_FULL_REJECT_PCT) / (GATE_FULL_ACCEPT_PCT - GATE_FULL_REJECT_PCT)
        * 100.0;
    if (residue as f64) < ramp {
        GateDecision::Accept
    } else {
        GateDecision::RejectLowBattery
    }
}

pub fn battery_gate(battery_pct: f64, msg_id: &str) -> GateDecision {
    gate_with_residue(battery_pct, gate_residue(msg_id))
}

/// Neighbor chosen when a draining node has no route for a message: highest
/// battery, lowest id on ties.
pub fn handoff_neighbor(neighbors: &BTreeMap<NodeId, f64>) -> Option<&NodeId> {
    neighbors
        .iter()
        .fold(None, |best: Option<(&NodeId, f64)>, (n, b)| match best {
            Some((_, bb)) if *b <= bb => best,
            _ => Some((n, *b)),
        })
        .map(|(n, _)| n)
}

/// Empties the queues of a node whose battery just dropped below the
/// handoff threshold. Each message goes to its routed next hop, else to
/// [`handoff_neighbor`]. With no neighbors the queues stay untouched.
pub fn low_battery_flush(
    bank: &mut QueueBank,
    next_hop: impl Fn(&SimAddress) -> Option<NodeId>,
    neighbors: &BTreeMap<NodeId, f64>,
) -> Vec<(NodeId, EmergencyMessage)> {
    let Some(fallback) = handoff_neighbor(neighbors).cloned() else {
        return Vec::new();
    };
    bank.drain_all()
        .into_iter()
        .map(|m| {
            let target = next_hop(&m.dest)
                .filter(|n| neighbors.contains_key(n))
                .unwrap_or_else(|| fallback.clone());
            (target, m)
        })
        .collect()
}
