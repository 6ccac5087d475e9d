//! Emergency ad hoc network for disaster areas: per-node OLSR routing,
//! the `<EMG>` frame format, priority store-and-forward, router backup,
//! emergency boot triggers, victim locating, a deterministic simulator and
//! the station service that sits on top of it.

pub mod backup;
pub mod boot;
pub mod frame;
pub mod ids;
pub mod locator;
pub mod olsr;
pub mod pipeline;
pub mod sim;
pub mod station;

pub use backup::{
    evaluate_backup, BackupContext, BackupDecision, BackupEvent, BackupLog, BackupRule,
};
pub use boot::{consumption_check, scan_cycle, EmergencyBeacon, NodeMode, ScanResult};
pub use frame::{parse_frame, EmergencyMessage, FrameError, MessageKind, Parsed, Priority};
pub use ids::{NodeId, SimAddress, SimTime};
pub use locator::{estimate_position, AnchoredLocation, Position, PositionEstimate, TopologyView};
pub use olsr::{select_mprs, NodeProtocolState, OlsrParams, Route, RoutingTable};
pub use pipeline::{Pipeline, PipelineParams, QueueBank};
pub use sim::{load_scenario, LogRecord, Scenario, ScenarioAction, World};
pub use station::{Session, StationError, StationService};
