//! Emergency boot triggers for dormant routers: battery-consumption
//! detection and signature scanning of nearby peers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ids::{NodeId, SimTime};

/// Signature carried by beacons of every device running in emergency mode.
pub const EMERGENCY_SIGNATURE: &str = "LIFELINE-EMG-v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootParams {
    pub battery_check_interval: SimTime,
    pub scan_interval: SimTime,
    /// Boot when the drop since the last check exceeds this many percent.
    pub consumption_threshold: f64,
}

impl Default for BootParams {
    fn default() -> Self {
        BootParams {
            battery_check_interval: SimTime::from_secs(60),
            scan_interval: SimTime::from_secs(30),
            consumption_threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeMode {
    Dormant,
    Emergency,
    Down,
}

impl fmt::Display for NodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeMode::Dormant => "dormant",
            NodeMode::Emergency => "emergency",
            NodeMode::Down => "down",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatteryObservation {
    pub last_check_level: f64,
    pub current_level: f64,
    pub checked_at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BootCheck {
    TriggerBoot,
    Stay,
}

/// Consumption threshold = level at last check − current level; boot when
/// it is positive.
pub fn consumption_check(obs: &BatteryObservation) -> BootCheck {
    consumption_check_with(obs, 0.0)
}

/// As [`consumption_check`] with a per-device threshold instead of zero.
pub fn consumption_check_with(obs: &BatteryObservation, threshold: f64) -> BootCheck {
    if obs.last_check_level - obs.current_level > threshold {
        BootCheck::TriggerBoot
    } else {
        BootCheck::Stay
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmergencyBeacon {
    pub node: NodeId,
    pub signature: String,
    pub is_station: bool,
}

impl EmergencyBeacon {
    pub fn new(node: NodeId, is_station: bool) -> Self {
        EmergencyBeacon {
            node,
            signature: EMERGENCY_SIGNATURE.to_string(),
            is_station,
        }
    }

    pub fn is_emergency(&self) -> bool {
        self.signature == EMERGENCY_SIGNATURE
    }
}

impl fmt::Display for EmergencyBeacon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BEACON {} {} station={}",
            self.node, self.signature, self.is_station
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ScanResult {
    JoinEmergency(NodeId),
    WaitRetry(SimTime),
}

/// One scan of the radio view. Stations are preferred, then the lowest
/// node id among emergency devices.
pub fn scan_cycle(beacons: &[EmergencyBeacon], now: SimTime, scan_interval: SimTime) -> ScanResult {
    let target = beacons
        .iter()
        .filter(|b| b.is_emergency())
        .min_by(|a, b| b.is_station.cmp(&a.is_station).then(a.node.cmp(&b.node)));
    match target {
        Some(b) => ScanResult::JoinEmergency(b.node.clone()),
        None => ScanResult::WaitRetry(now + scan_interval),
    }
}

/// Idempotent. Returns whether the mode changed; a node that is down stays
/// down.
pub fn enter_emergency_mode(mode: &mut NodeMode) -> bool {
    match mode {
        NodeMode::Dormant => {
            *mode = NodeMode::Emergency;
            true
        }
        NodeMode::Emergency | NodeMode::Down => false,
    }
}
