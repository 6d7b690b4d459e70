//! Discrete-event engine: belt kinematics, camera station, controller logic
//! and the MCU emulator behind a byte-level serial link.
//!
//! Positions are integer micro-feet and time is integer microseconds, so the
//! schedule is exact. The belt moves only while no pause reason is active;
//! an odometer of accumulated running time gives every item's position.
//!
//! At equal timestamps the MCU timers run first, then belt movement, then
//! queued wake-ups in insertion order.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;

use serde::Serialize;

use crate::classifier::{Classification, Classifier, ClassifierError, ClassifyRequest, RNG_ALGORITHM};
use crate::config::Config;
use crate::domain::{BinIndex, ConfigError, MachineConfig, RoutingTable, ServoId, WasteClass, NUM_SERVOS};
use crate::link::mcu::{Mcu, McuConfig};
use crate::link::{hex, Codec, LinkMessage, StreamDecoder, StreamItem};
use crate::sim::event::{EventKind, ItemId, PauseReason, SimCommand, SimEvent, TraceHeader};
use crate::sim::metrics::{MetricsAccumulator, SimMetrics};
use crate::sim::scenario::Scenario;
use crate::sim::status::{BeltItemView, StatusSnapshot, StatusTracker};
use crate::telemetry::{format_sms, gsm_send, Attempt, GsmChannel, Notification, RetryPolicy, SmsClock, ThresholdMonitor};
use crate::time::SimTime;

#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    pub seed: u64,
    /// Keep every event for trace output.
    pub record_events: bool,
    /// Keep every serial frame.
    pub record_link: bool,
    /// Never finish on quiescence (live sessions).
    pub keep_alive: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error("serial link corrupted: {0}")]
    Link(String),
    #[error("simulation is not running")]
    NotRunning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkDirection {
    ToMcu,
    ToController,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkRecord {
    pub time: SimTime,
    pub direction: LinkDirection,
    pub bytes: Vec<u8>,
    pub message: LinkMessage,
}

impl fmt::Display for LinkRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dir = match self.direction {
            LinkDirection::ToMcu => "C>M",
            LinkDirection::ToController => "M>C",
        };
        write!(f, "{} {dir} {} {}", self.time, hex(&self.bytes), self.message)
    }
}

/// One transmission attempt of a notification, as written to the log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NotificationRecord {
    pub notification: Notification,
    pub attempt: u32,
    pub sent_at: SimTime,
    pub sms: String,
}

impl fmt::Display for NotificationRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "id={} bin={} attempt={} state={} sim_time={} sms={}",
            self.notification.id,
            self.notification.bin,
            self.attempt,
            self.notification.state.slug(),
            self.sent_at,
            self.sms
        )
    }
}

/// Where an item is in its journey.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemState {
    Arriving,
    AtCamera,
    Classifying,
    Routed(BinIndex),
    Rejected,
}

impl ItemState {
    fn label(self) -> String {
        match self {
            ItemState::Arriving => "arriving".into(),
            ItemState::AtCamera => "at_camera".into(),
            ItemState::Classifying => "classifying".into(),
            ItemState::Routed(bin) => format!("routed:{bin}"),
            ItemState::Rejected => "rejected".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Item {
    class: WasteClass,
    image_ref: String,
    entry_odo: u64,
    state: ItemState,
    presence_at: SimTime,
    pending: Option<Classification>,
    predicted: Option<WasteClass>,
    /// Index into the waypoint list (three servo stations, then belt end).
    next_waypoint: usize,
    /// Target servo slot for routed items.
    target: Option<usize>,
    at_gate: bool,
    on_belt: bool,
}

#[derive(Debug, Clone)]
enum Wake {
    Arrival(usize),
    CaptureDone(ItemId),
    ClassifyDone(ItemId),
    Command(SimCommand, Option<String>),
    Notify(Notification, Attempt),
}

struct Scheduled {
    time: SimTime,
    order: u64,
    wake: Wake,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.order) == (other.time, other.order)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.order).cmp(&(other.time, other.order))
    }
}

const MICRO: u128 = 1_000_000;

fn to_micro_ft(ft: f64) -> u64 {
    (ft * 1e6).round() as u64
}

#[derive(Debug, Clone)]
struct Belt {
    speed_uft_s: u64,
    running_us: u64,
    last: SimTime,
    capture: Option<ItemId>,
    operator: bool,
    holds: BTreeSet<ItemId>,
}

impl Belt {
    fn running(&self) -> bool {
        self.capture.is_none() && !self.operator && self.holds.is_empty()
    }

    fn advance(&mut self, now: SimTime) {
        if self.running() {
            self.running_us += (now - self.last).as_micros();
        }
        self.last = now;
    }

    fn odo(&self) -> u64 {
        (u128::from(self.running_us) * u128::from(self.speed_uft_s) / MICRO) as u64
    }

    /// When the odometer will reach `target`, if the belt keeps running.
    fn time_to_reach(&self, target: u64) -> Option<SimTime> {
        if !self.running() {
            return None;
        }
        let speed = u128::from(self.speed_uft_s);
        let needed = (u128::from(target) * MICRO).div_ceil(speed) as u64;
        Some(self.last + SimTime::from_micros(needed.saturating_sub(self.running_us)))
    }
}

pub struct Simulation<C: Classifier> {
    machine: MachineConfig,
    routing: RoutingTable,
    classifier: C,
    classifier_name: String,
    options: SimOptions,
    gate: Option<f64>,
    now: SimTime,
    seq: u64,
    events: Vec<SimEvent>,
    published: usize,
    metrics: MetricsAccumulator,
    status: StatusTracker,
    scenario: Scenario,
    items: Vec<Item>,
    in_flight: Vec<ItemId>,
    belt: Belt,
    belt_reported: bool,
    camera_uft: u64,
    waypoints: [u64; NUM_SERVOS + 1],
    capture_delay: SimTime,
    mcu: Mcu,
    codec: Codec,
    to_mcu: StreamDecoder,
    to_ctrl: StreamDecoder,
    link_log: Vec<LinkRecord>,
    armed: [Option<ItemId>; NUM_SERVOS],
    deflecting: [Option<ItemId>; NUM_SERVOS],
    heap: BinaryHeap<Reverse<Scheduled>>,
    order: u64,
    monitor: ThresholdMonitor,
    gsm: GsmChannel,
    retry: RetryPolicy,
    machine_id: String,
    clock: SmsClock,
    depth_mm: u32,
    notifications: Vec<NotificationRecord>,
    rejects: u64,
    max_time: SimTime,
    finished: bool,
}

impl<C: Classifier> Simulation<C> {
    pub fn new(config: &Config, scenario: &Scenario, classifier: C, options: SimOptions) -> Result<Self, SimError> {
        config.validate()?;
        scenario.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let machine = config.machine.clone();
        let routing = config.routing_table()?;
        let mut scenario = scenario.clone();
        scenario.items.sort_by(|a, b| a.t.total_cmp(&b.t));
        scenario.commands.sort_by(|a, b| a.t.total_cmp(&b.t));

        let mcu = Mcu::new(McuConfig {
            routing,
            actuation: SimTime::from_secs_f64(machine.servo_actuation_s),
            telemetry_period: SimTime::from_secs_f64(config.link.telemetry_period_s),
            bin_depth_m: machine.bin_depth_m,
            bin_fill_per_item_m: machine.bin_fill_per_item_m,
        });
        let codec = Codec::new(config.link.checksum);
        let st = machine.servo_stations_ft;
        let classifier_name = classifier.name();
        let mut sim = Simulation {
            routing,
            classifier,
            classifier_name,
            gate: config.classifier.confidence_gate,
            now: SimTime::ZERO,
            seq: 0,
            events: Vec::new(),
            published: 0,
            metrics: MetricsAccumulator::new(routing),
            status: StatusTracker::new(&config.telemetry.machine_id, config.telemetry.clock(), machine.threshold_percent),
            items: Vec::new(),
            in_flight: Vec::new(),
            belt: Belt {
                speed_uft_s: to_micro_ft(machine.belt_speed_ft_s).max(1),
                running_us: 0,
                last: SimTime::ZERO,
                capture: None,
                operator: false,
                holds: BTreeSet::new(),
            },
            belt_reported: false,
            camera_uft: to_micro_ft(machine.camera_station_ft),
            waypoints: [
                to_micro_ft(st[0]),
                to_micro_ft(st[1]),
                to_micro_ft(st[2]),
                to_micro_ft(machine.belt_length_ft),
            ],
            capture_delay: SimTime::from_secs_f64(machine.capture_delay_s),
            mcu,
            codec,
            to_mcu: StreamDecoder::new(codec),
            to_ctrl: StreamDecoder::new(codec),
            link_log: Vec::new(),
            armed: [None; NUM_SERVOS],
            deflecting: [None; NUM_SERVOS],
            heap: BinaryHeap::new(),
            order: 0,
            monitor: ThresholdMonitor::new(machine.threshold_percent),
            gsm: GsmChannel::new(config.telemetry.gsm_success_probability, options.seed),
            retry: config.telemetry.retry_policy(),
            machine_id: config.telemetry.machine_id.clone(),
            clock: config.telemetry.clock(),
            depth_mm: (machine.bin_depth_m * 1000.0).round() as u32,
            notifications: Vec::new(),
            rejects: 0,
            max_time: SimTime::from_secs_f64(machine.max_duration_s),
            finished: false,
            machine,
            options,
            scenario: Scenario::default(),
        };
        for (i, item) in scenario.items.iter().enumerate() {
            sim.schedule(SimTime::from_secs_f64(item.t), Wake::Arrival(i));
        }
        for c in &scenario.commands {
            sim.schedule(SimTime::from_secs_f64(c.t), Wake::Command(c.command, None));
        }
        sim.scenario = scenario;
        Ok(sim)
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.events
    }

    /// Events recorded since the previous call.
    pub fn take_new_events(&mut self) -> &[SimEvent] {
        let from = self.published;
        self.published = self.events.len();
        &self.events[from..]
    }

    pub fn link_log(&self) -> &[LinkRecord] {
        &self.link_log
    }

    pub fn notifications(&self) -> &[NotificationRecord] {
        &self.notifications
    }

    pub fn mcu(&self) -> &Mcu {
        &self.mcu
    }

    pub fn metrics(&self) -> SimMetrics {
        self.metrics.metrics()
    }

    pub fn header(&self) -> TraceHeader {
        TraceHeader {
            rng: RNG_ALGORITHM.into(),
            seed: self.options.seed,
            classifier: self.classifier_name.clone(),
            routing: self.routing,
        }
    }

    pub fn trace_text(&self) -> String {
        let mut out = self.header().to_string();
        out.push('\n');
        for e in &self.events {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }

    pub fn snapshot(&self) -> StatusSnapshot {
        let mut s = self.status.snapshot(self.finished);
        s.sim_time = self.now;
        s.belt = self.belt_items();
        s
    }

    pub fn belt_items(&self) -> Vec<BeltItemView> {
        let odo = self.belt.odo();
        self.in_flight
            .iter()
            .map(|&id| {
                let it = &self.items[id as usize];
                BeltItemView {
                    item: id,
                    class: it.class,
                    position_ft: (odo - it.entry_odo) as f64 / 1e6,
                    state: it.state.label(),
                }
            })
            .collect()
    }

    /// Time of the next thing that will happen, if any.
    pub fn next_time(&self) -> Option<SimTime> {
        if self.finished {
            return None;
        }
        let queued = self.heap.peek().map(|Reverse(s)| s.time);
        [queued, self.mcu.next_deadline(), self.next_kinematic()].into_iter().flatten().min()
    }

    /// Runs to completion.
    pub fn run(&mut self) -> Result<SimMetrics, SimError> {
        while self.step()? {}
        Ok(self.metrics())
    }

    /// Processes everything up to `t`, then holds the clock at `t`.
    pub fn run_until(&mut self, t: SimTime) -> Result<(), SimError> {
        while self.next_time().is_some_and(|n| n <= t) {
            self.step()?;
        }
        if !self.finished && t > self.now {
            self.now = t.min(self.max_time);
            self.belt.advance(self.now);
        }
        Ok(())
    }

    /// Applies an operator command at the current time and returns the
    /// sequence number of the resulting event.
    pub fn inject(&mut self, command: SimCommand, client: Option<String>) -> Result<u64, SimError> {
        if self.finished {
            return Err(SimError::NotRunning);
        }
        let seq = self.seq;
        self.apply_command(command, client)?;
        self.settle()?;
        Ok(seq)
    }

    /// Processes the next instant. Returns `false` once the run has ended.
    pub fn step(&mut self) -> Result<bool, SimError> {
        if self.finished {
            return Ok(false);
        }
        let queued = self.heap.peek().map(|Reverse(s)| s.time);
        let mcu_due = self.mcu.next_deadline();
        let Some(t) = [queued, mcu_due, self.next_kinematic()].into_iter().flatten().min() else {
            self.finished = true;
            return Ok(false);
        };
        if t > self.max_time {
            self.finished = true;
            return Ok(false);
        }
        self.now = t;
        self.belt.advance(t);

        let mut done = false;
        if mcu_due == Some(t) {
            let out = self.mcu.advance(t);
            let ticked = out.iter().any(|(_, m)| matches!(m, LinkMessage::Level { .. }));
            self.from_mcu(out.into_iter().map(|(_, m)| m).collect())?;
            // stop on the first tick that finds nothing left to do
            done = ticked && !self.options.keep_alive && self.quiescent() && !self.kinematic_due();
        } else if queued == Some(t) && !self.kinematic_due() {
            let Reverse(s) = self.heap.pop().expect("peeked");
            self.wake(s.wake)?;
        }
        self.settle()?;
        self.finished = done;
        Ok(!self.finished)
    }

    fn kinematic_due(&self) -> bool {
        self.next_kinematic() == Some(self.now)
    }

    fn quiescent(&self) -> bool {
        self.heap.is_empty() && self.in_flight.is_empty() && self.armed.iter().all(Option::is_none)
    }

    fn schedule(&mut self, time: SimTime, wake: Wake) {
        self.order += 1;
        self.heap.push(Reverse(Scheduled { time, order: self.order, wake }));
    }

    fn emit(&mut self, kind: EventKind) {
        let e = SimEvent { time: self.now, seq: self.seq, kind };
        self.seq += 1;
        self.metrics.feed(&e).expect("engine emits consistent events");
        self.status.feed(&e);
        if self.options.record_events {
            self.events.push(e);
        }
    }

    /// Moves items to their next waypoints and reports belt state changes.
    fn settle(&mut self) -> Result<(), SimError> {
        self.process_positions()?;
        let running = self.belt.running();
        if running != self.belt_reported {
            self.belt_reported = running;
            self.send(LinkMessage::Belt { run: running })?;
        }
        Ok(())
    }

    fn position(&self, id: ItemId) -> u64 {
        self.belt.odo() - self.items[id as usize].entry_odo
    }

    /// Position at which the item next needs attention.
    fn trigger(&self, id: ItemId) -> Option<u64> {
        let it = &self.items[id as usize];
        match it.state {
            ItemState::Arriving if self.belt.capture.is_none() => Some(self.camera_uft),
            ItemState::Routed(_) | ItemState::Rejected if !it.at_gate => Some(self.waypoints[it.next_waypoint]),
            _ => None,
        }
    }

    fn next_kinematic(&self) -> Option<SimTime> {
        if !self.belt.running() {
            return None;
        }
        self.in_flight
            .iter()
            .filter_map(|&id| {
                let target = self.trigger(id)?;
                self.belt.time_to_reach(self.items[id as usize].entry_odo + target)
            })
            .min()
    }

    fn process_positions(&mut self) -> Result<(), SimError> {
        loop {
            let due = self
                .in_flight
                .iter()
                .copied()
                .find(|&id| self.trigger(id).is_some_and(|p| self.position(id) >= p));
            let Some(id) = due else { return Ok(()) };
            self.reach_waypoint(id)?;
        }
    }

    fn reach_waypoint(&mut self, id: ItemId) -> Result<(), SimError> {
        let idx = id as usize;
        match self.items[idx].state {
            ItemState::Arriving => {
                self.items[idx].state = ItemState::AtCamera;
                self.items[idx].presence_at = self.now;
                self.emit(EventKind::PresenceDetected { item: id });
                self.belt.capture = Some(id);
                self.emit(EventKind::BeltPaused { reason: PauseReason::Capture, item: Some(id), running: false });
                self.schedule(self.now + self.capture_delay, Wake::CaptureDone(id));
            }
            ItemState::Routed(_) | ItemState::Rejected => {
                let wp = self.items[idx].next_waypoint;
                if wp == NUM_SERVOS {
                    self.reject(id);
                } else if self.items[idx].target == Some(wp) {
                    self.items[idx].at_gate = true;
                    self.contact(id, wp)?;
                } else {
                    self.items[idx].next_waypoint += 1;
                    self.try_arm(wp)?;
                }
            }
            _ => unreachable!("no trigger in state {:?}", self.items[idx].state),
        }
        Ok(())
    }

    fn contact(&mut self, id: ItemId, slot: usize) -> Result<(), SimError> {
        let servo = ServoId::new(slot as u8 + 1).expect("slot in range");
        match self.armed[slot] {
            Some(x) if x == id => {
                let out = self.mcu.item_at_gate(servo, self.now);
                self.from_mcu(out)?;
            }
            None => self.try_arm(slot)?,
            Some(_) => {}
        }
        if self.items[id as usize].on_belt {
            self.belt.holds.insert(id);
            let running = self.belt.running();
            self.emit(EventKind::BeltPaused { reason: PauseReason::Hold, item: Some(id), running });
        }
        Ok(())
    }

    fn reject(&mut self, id: ItemId) {
        let class = self.items[id as usize].class;
        self.leave_belt(id);
        self.rejects += 1;
        self.emit(EventKind::ItemRejected { item: id, class, rejects: self.rejects });
    }

    fn leave_belt(&mut self, id: ItemId) {
        self.items[id as usize].on_belt = false;
        self.in_flight.retain(|&x| x != id);
    }

    /// Arms servo `slot` for the next item that will reach it, if that item
    /// is routed there. Items already committed to an earlier station never
    /// reach it and do not block.
    fn try_arm(&mut self, slot: usize) -> Result<(), SimError> {
        if self.armed[slot].is_some() {
            return Ok(());
        }
        let mut candidate = None;
        for &id in &self.in_flight {
            let it = &self.items[id as usize];
            match it.state {
                ItemState::Arriving | ItemState::AtCamera | ItemState::Classifying => break,
                _ if it.next_waypoint > slot => continue,
                ItemState::Routed(_) if it.target.is_some_and(|t| t < slot) => continue,
                ItemState::Routed(_) if it.target == Some(slot) => {
                    candidate = Some(id);
                    break;
                }
                _ => break,
            }
        }
        let Some(id) = candidate else { return Ok(()) };
        let class = self.items[id as usize].predicted.expect("routed items have a prediction");
        self.armed[slot] = Some(id);
        self.send(LinkMessage::Detected { class })?;
        if self.items[id as usize].at_gate {
            let servo = ServoId::new(slot as u8 + 1).expect("slot in range");
            let out = self.mcu.item_at_gate(servo, self.now);
            self.from_mcu(out)?;
        }
        Ok(())
    }

    fn wake(&mut self, wake: Wake) -> Result<(), SimError> {
        match wake {
            Wake::Arrival(i) => {
                let spec = &self.scenario.items[i];
                let id = self.items.len() as ItemId;
                let image_ref = spec.image_ref.clone().unwrap_or_else(|| format!("img-{id:06}"));
                let class = spec.class;
                self.items.push(Item {
                    class,
                    image_ref,
                    entry_odo: self.belt.odo(),
                    state: ItemState::Arriving,
                    presence_at: SimTime::ZERO,
                    pending: None,
                    predicted: None,
                    next_waypoint: 0,
                    target: None,
                    at_gate: false,
                    on_belt: true,
                });
                self.in_flight.push(id);
                self.emit(EventKind::ItemArrived { item: id, class });
            }
            Wake::CaptureDone(id) => self.capture_done(id)?,
            Wake::ClassifyDone(id) => self.classify_done(id)?,
            Wake::Command(cmd, client) => self.apply_command(cmd, client)?,
            Wake::Notify(n, attempt) => {
                let record = Notification { state: attempt.state, attempts: attempt.number, ..n };
                self.emit(EventKind::NotificationSent {
                    notification: n.id,
                    bin: n.bin,
                    level: n.level_percent,
                    attempt: attempt.number,
                    state: attempt.state,
                });
                let stamped = Notification { time: self.now, ..record.clone() };
                self.notifications.push(NotificationRecord {
                    sms: format_sms(&stamped, &self.machine_id, &self.clock),
                    notification: record,
                    attempt: attempt.number,
                    sent_at: self.now,
                });
            }
        }
        Ok(())
    }

    fn capture_done(&mut self, id: ItemId) -> Result<(), SimError> {
        let idx = id as usize;
        self.items[idx].state = ItemState::Classifying;
        let image = self.items[idx].image_ref.clone();
        self.emit(EventKind::ImageCaptured { item: id, image: image.clone() });
        let request = ClassifyRequest { item_id: id, true_class: self.items[idx].class, image_ref: &image };
        let result = self.classifier.classify(&request)?;
        let latency = result.latency();
        let done = if self.machine.latency_includes_pause {
            let presence = self.items[idx].presence_at;
            presence + latency.max(self.now - presence)
        } else {
            self.now + latency
        };
        self.items[idx].pending = Some(result);
        self.schedule(done, Wake::ClassifyDone(id));
        Ok(())
    }

    fn classify_done(&mut self, id: ItemId) -> Result<(), SimError> {
        let idx = id as usize;
        let class = self.items[idx].class;
        let result = self.items[idx].pending.take().expect("classification pending");
        let (predicted, peak) = match &result {
            Classification::Predicted(p) => {
                let gated = self.gate.is_some_and(|g| p.peak() < g);
                ((!gated).then_some(p.predicted), p.peak())
            }
            Classification::Unavailable { .. } => (None, 0.0),
        };
        self.emit(EventKind::Classified { item: id, class, predicted, peak, latency: result.latency() });
        self.items[idx].predicted = predicted;
        match predicted {
            Some(p) => {
                let (cmd, bin) = self.routing.route_for(p);
                self.items[idx].state = ItemState::Routed(bin);
                self.items[idx].target = Some(cmd.servo.slot());
                self.release_capture(id);
                self.try_arm(cmd.servo.slot())?;
            }
            None => {
                self.items[idx].state = ItemState::Rejected;
                self.release_capture(id);
                self.send(LinkMessage::StopAll)?;
                self.armed = [None; NUM_SERVOS];
                for slot in 0..NUM_SERVOS {
                    self.try_arm(slot)?;
                }
            }
        }
        Ok(())
    }

    fn release_capture(&mut self, id: ItemId) {
        self.belt.capture = None;
        let running = self.belt.running();
        self.emit(EventKind::BeltResumed { reason: PauseReason::Capture, item: Some(id), running });
    }

    fn apply_command(&mut self, command: SimCommand, client: Option<String>) -> Result<(), SimError> {
        self.emit(EventKind::OperatorCommand { command, client });
        match command {
            SimCommand::Dump { bin } => self.send(LinkMessage::Dump { bin })?,
            SimCommand::Pause if !self.belt.operator => {
                self.belt.operator = true;
                self.emit(EventKind::BeltPaused { reason: PauseReason::Operator, item: None, running: false });
            }
            SimCommand::Resume if self.belt.operator => {
                self.belt.operator = false;
                let running = self.belt.running();
                self.emit(EventKind::BeltResumed { reason: PauseReason::Operator, item: None, running });
            }
            SimCommand::Pause | SimCommand::Resume => {}
        }
        Ok(())
    }

    fn log_link(&mut self, direction: LinkDirection, bytes: &[u8], message: LinkMessage) {
        if self.options.record_link {
            self.link_log.push(LinkRecord { time: self.now, direction, bytes: bytes.to_vec(), message });
        }
    }

    /// Controller to MCU: frame, decode on the MCU side, deliver replies.
    fn send(&mut self, msg: LinkMessage) -> Result<(), SimError> {
        let bytes = self.codec.encode(&msg);
        for item in self.to_mcu.push(&bytes) {
            let StreamItem::Message(decoded) = item else {
                return Err(SimError::Link(format!("{item:?}")));
            };
            self.log_link(LinkDirection::ToMcu, &bytes, decoded);
            let replies = self.mcu.handle(&decoded, self.now);
            self.from_mcu(replies)?;
        }
        Ok(())
    }

    /// MCU to controller.
    fn from_mcu(&mut self, msgs: Vec<LinkMessage>) -> Result<(), SimError> {
        for msg in msgs {
            let bytes = self.codec.encode(&msg);
            for item in self.to_ctrl.push(&bytes) {
                let StreamItem::Message(decoded) = item else {
                    return Err(SimError::Link(format!("{item:?}")));
                };
                self.log_link(LinkDirection::ToController, &bytes, decoded);
                self.on_mcu_message(decoded)?;
            }
        }
        Ok(())
    }

    fn on_mcu_message(&mut self, msg: LinkMessage) -> Result<(), SimError> {
        match msg {
            LinkMessage::ServoDone { command } => {
                let slot = command.servo.slot();
                let Some(id) = self.armed[slot].take() else {
                    return Err(SimError::Link(format!("{msg} with no armed item")));
                };
                self.deflecting[slot] = Some(id);
                self.emit(EventKind::ServoFired { item: id, servo: command.servo, direction: command.direction });
            }
            LinkMessage::BinCount { bin, count } => {
                let slot = (0..NUM_SERVOS).find(|&s| {
                    self.deflecting[s].is_some_and(|id| {
                        self.items[id as usize].predicted.is_some_and(|p| self.routing.bin_for(p) == bin)
                    })
                });
                // otherwise this is the reset that follows a dump
                if let Some(slot) = slot {
                    let id = self.deflecting[slot].take().expect("found above");
                    let class = self.items[id as usize].class;
                    if self.belt.holds.remove(&id) {
                        let running = self.belt.running();
                        self.emit(EventKind::BeltResumed { reason: PauseReason::Hold, item: Some(id), running });
                    }
                    self.leave_belt(id);
                    self.emit(EventKind::ItemBinned { item: id, class, bin, count });
                    self.try_arm(slot)?;
                }
            }
            LinkMessage::Level { bin, distance_mm } => {
                let d = u32::from(distance_mm).min(self.depth_mm);
                let level = if self.depth_mm == 0 {
                    0.0
                } else {
                    f64::from(self.depth_mm - d) * 100.0 / f64::from(self.depth_mm)
                };
                self.emit(EventKind::LevelSample { bin, distance_mm, level });
                if let Some(mut n) = self.monitor.observe(bin, level, self.now) {
                    let queued = n.clone();
                    let attempts = gsm_send(&mut n, &mut self.gsm, &self.retry)
                        .map_err(|e| SimError::Link(e.to_string()))?;
                    for a in attempts {
                        self.schedule(self.now + a.offset, Wake::Notify(queued.clone(), a));
                    }
                }
            }
            LinkMessage::Ack { .. } => {}
            LinkMessage::Detected { .. } | LinkMessage::StopAll | LinkMessage::Dump { .. } | LinkMessage::Belt { .. } => {
                return Err(SimError::Link(format!("controller received command {msg}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Build(#[from] crate::config::BuildError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Builds the configured classifier and runs the scenario to completion.
pub fn simulate(
    config: &Config,
    scenario: &Scenario,
    options: SimOptions,
) -> Result<Simulation<Box<dyn Classifier + Send>>, RunError> {
    let classifier = config.build_classifier(options.seed)?;
    let mut sim = Simulation::new(config, scenario, classifier, options)?;
    sim.run()?;
    Ok(sim)
}
