//! Operator-facing machine status, folded from the event stream.

use serde::{Deserialize, Serialize};

use crate::domain::{BinIndex, WasteClass, NUM_BINS};
use crate::sim::event::{EventKind, ItemId, PauseReason, SimCommand, SimEvent};
use crate::telemetry::{display_update, format_sms, DeliveryState, DisplayInput, DisplayState, Notification, SmsClock};
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStatus {
    pub bin: BinIndex,
    pub count: u32,
    pub level_percent: f64,
    pub distance_mm: Option<u16>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NotificationSummary {
    pub sent: u64,
    pub failed: u64,
    pub retrying: u64,
    /// Text of the most recently delivered message.
    pub last_sms: Option<String>,
}

/// Position of an item still on the belt (live sessions only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeltItemView {
    pub item: ItemId,
    pub class: WasteClass,
    pub position_ft: f64,
    pub state: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusSnapshot {
    pub sim_time: SimTime,
    /// Sequence number of the last event folded in.
    pub last_seq: Option<u64>,
    pub belt_running: bool,
    pub operator_paused: bool,
    pub bins: Vec<BinStatus>,
    pub threshold_percent: f64,
    pub last_detected_class: Option<WasteClass>,
    pub items_in_flight: u64,
    pub rejected: u64,
    pub notifications: NotificationSummary,
    pub finished: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub belt: Vec<BeltItemView>,
}

impl StatusSnapshot {
    pub fn bin(&self, bin: BinIndex) -> &BinStatus {
        &self.bins[bin.slot()]
    }
}

#[derive(Debug, Clone)]
pub struct StatusTracker {
    machine_id: String,
    clock: SmsClock,
    threshold: f64,
    display: DisplayState,
    levels: [(f64, Option<u16>); NUM_BINS],
    sim_time: SimTime,
    last_seq: Option<u64>,
    belt_running: bool,
    operator_paused: bool,
    arrived: u64,
    left: u64,
    rejected: u64,
    notifications: NotificationSummary,
}

impl StatusTracker {
    pub fn new(machine_id: &str, clock: SmsClock, threshold_percent: f64) -> Self {
        StatusTracker {
            machine_id: machine_id.to_string(),
            clock,
            threshold: threshold_percent,
            display: DisplayState::default(),
            levels: [(0.0, None); NUM_BINS],
            sim_time: SimTime::ZERO,
            last_seq: None,
            belt_running: true,
            operator_paused: false,
            arrived: 0,
            left: 0,
            rejected: 0,
            notifications: NotificationSummary::default(),
        }
    }

    pub fn display(&self) -> &DisplayState {
        &self.display
    }

    pub fn feed(&mut self, e: &SimEvent) {
        self.sim_time = e.time;
        self.last_seq = Some(e.seq);
        match &e.kind {
            EventKind::ItemArrived { .. } => self.arrived += 1,
            EventKind::Classified { predicted: Some(p), .. } => {
                self.display = display_update(std::mem::take(&mut self.display), DisplayInput::Classified(*p));
            }
            EventKind::ItemBinned { bin, .. } => {
                self.left += 1;
                self.display = display_update(std::mem::take(&mut self.display), DisplayInput::Binned(*bin));
            }
            EventKind::ItemRejected { .. } => {
                self.left += 1;
                self.rejected += 1;
            }
            EventKind::BeltPaused { reason, running, .. } | EventKind::BeltResumed { reason, running, .. } => {
                self.belt_running = *running;
                if *reason == PauseReason::Operator {
                    self.operator_paused = matches!(e.kind, EventKind::BeltPaused { .. });
                }
            }
            EventKind::LevelSample { bin, distance_mm, level } => {
                self.levels[bin.slot()] = (*level, Some(*distance_mm));
            }
            EventKind::OperatorCommand { command: SimCommand::Dump { bin }, .. } => {
                self.display = display_update(std::mem::take(&mut self.display), DisplayInput::Dumped(*bin));
                // emptied now; the distance comes back with the next sample
                self.levels[bin.slot()] = (0.0, None);
            }
            EventKind::NotificationSent { notification, bin, level, attempt, state } => {
                let n = &mut self.notifications;
                match state {
                    DeliveryState::Sent => {
                        n.sent += 1;
                        let record = Notification {
                            id: *notification,
                            bin: *bin,
                            level_percent: *level,
                            time: e.time,
                            state: *state,
                            attempts: *attempt,
                        };
                        n.last_sms = Some(format_sms(&record, &self.machine_id, &self.clock));
                    }
                    DeliveryState::Failed => n.failed += 1,
                    DeliveryState::Retrying => n.retrying += 1,
                    DeliveryState::Queued => {}
                }
            }
            _ => {}
        }
    }

    pub fn snapshot(&self, finished: bool) -> StatusSnapshot {
        StatusSnapshot {
            sim_time: self.sim_time,
            last_seq: self.last_seq,
            belt_running: self.belt_running,
            operator_paused: self.operator_paused,
            bins: BinIndex::all()
                .map(|bin| BinStatus {
                    bin,
                    count: self.display.counters[bin.slot()],
                    level_percent: self.levels[bin.slot()].0,
                    distance_mm: self.levels[bin.slot()].1,
                })
                .collect(),
            threshold_percent: self.threshold,
            last_detected_class: self.display.last_detected_class,
            items_in_flight: self.arrived - self.left,
            rejected: self.rejected,
            notifications: self.notifications.clone(),
            finished,
            belt: Vec::new(),
        }
    }
}
