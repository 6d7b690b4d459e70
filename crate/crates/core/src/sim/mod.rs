//! Discrete-event simulation of the sorting line.

pub mod engine;
pub mod event;
pub mod metrics;
pub mod replay;
pub mod scenario;
pub mod status;

pub use engine::{
    simulate, ItemState, LinkDirection, LinkRecord, NotificationRecord, RunError, SimError, SimOptions, Simulation,
};
pub use event::{EventKind, ItemId, PauseReason, SimCommand, SimEvent, TraceHeader};
pub use metrics::{format_table, ClassMetrics, MetricsAccumulator, SimMetrics};
pub use replay::{parse_trace, replay, MalformedTrace, Trace};
pub use scenario::{Scenario, ScenarioItem, ScheduledCommand};
pub use status::{BeltItemView, BinStatus, NotificationSummary, StatusSnapshot, StatusTracker};
