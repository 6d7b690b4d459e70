//! Host-side emulator of the servo microcontroller.
//!
//! The emulator is a single-owner state machine driven by the simulation
//! clock. It consumes [`LinkMessage`]s from the controller and produces the
//! replies the firmware would send. Physical stimuli that never cross the
//! serial link (an item touching a servo gate) enter through
//! [`Mcu::item_at_gate`].
//!
//! Servo lifecycle: `DETECTED` starts a swing toward the routed side. Once the
//! swing has taken `actuation` and the item is at the gate, the item is pushed
//! into its bin: the MCU reports `SERVO_DONE` followed by `BIN_COUNT` and the
//! arm returns to rest. `STOP_ALL` returns every arm to rest without reporting.

use crate::domain::{
    BinIndex, BinState, Direction, RoutingTable, ServoCommand, ServoId, NUM_BINS, NUM_SERVOS,
};
use crate::link::{msg_type, LinkMessage};
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq)]
pub struct McuConfig {
    pub routing: RoutingTable,
    pub actuation: SimTime,
    /// Interval between LEVEL reports; every bin reports on each tick.
    pub telemetry_period: SimTime,
    pub bin_depth_m: f64,
    pub bin_fill_per_item_m: f64,
}

impl Default for McuConfig {
    fn default() -> Self {
        McuConfig {
            routing: RoutingTable::default(),
            actuation: SimTime::from_secs(1),
            telemetry_period: SimTime::from_secs(1),
            bin_depth_m: 0.5,
            bin_fill_per_item_m: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServoState {
    Idle,
    Swinging { direction: Direction, done_at: SimTime, contact: bool },
    Armed { direction: Direction },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mcu {
    cfg: McuConfig,
    counts: [u16; NUM_BINS],
    servos: [ServoState; NUM_SERVOS],
    next_telemetry: Option<SimTime>,
    belt_running: bool,
    diagnostics: Vec<String>,
}

impl Mcu {
    pub fn new(cfg: McuConfig) -> Self {
        let next_telemetry = (cfg.telemetry_period > SimTime::ZERO).then_some(SimTime::ZERO);
        Mcu {
            cfg,
            counts: [0; NUM_BINS],
            servos: [ServoState::Idle; NUM_SERVOS],
            next_telemetry,
            belt_running: false,
            diagnostics: Vec::new(),
        }
    }

    pub fn count(&self, bin: BinIndex) -> u16 {
        self.counts[bin.slot()]
    }

    pub fn counts(&self) -> [u16; NUM_BINS] {
        self.counts
    }

    pub fn servo(&self, id: ServoId) -> ServoState {
        self.servos[id.slot()]
    }

    pub fn belt_running(&self) -> bool {
        self.belt_running
    }

    /// Messages the emulator could not act on.
    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    pub fn bin_state(&self, bin: BinIndex) -> BinState {
        BinState {
            bin,
            item_count: u32::from(self.counts[bin.slot()]),
            depth_m: self.cfg.bin_depth_m,
            fill_per_item_m: self.cfg.bin_fill_per_item_m,
            threshold_percent: 0.0,
        }
    }

    /// Earliest time at which [`Mcu::advance`] will produce output.
    pub fn next_deadline(&self) -> Option<SimTime> {
        let swings = self.servos.iter().filter_map(|s| match s {
            ServoState::Swinging { done_at, .. } => Some(*done_at),
            _ => None,
        });
        swings.chain(self.next_telemetry).min()
    }

    /// Runs timers up to and including `now`, returning timestamped output.
    pub fn advance(&mut self, now: SimTime) -> Vec<(SimTime, LinkMessage)> {
        let mut out = Vec::new();
        while let Some(t) = self.next_deadline().filter(|t| *t <= now) {
            for slot in 0..NUM_SERVOS {
                if let ServoState::Swinging { direction, done_at, contact } = self.servos[slot] {
                    if done_at == t {
                        if contact {
                            let msgs = self.deflect(slot, direction);
                            out.extend(msgs.into_iter().map(|m| (t, m)));
                        } else {
                            self.servos[slot] = ServoState::Armed { direction };
                        }
                    }
                }
            }
            if self.next_telemetry == Some(t) {
                for bin in BinIndex::all() {
                    out.push((t, self.level_report(bin)));
                }
                self.next_telemetry = Some(t + self.cfg.telemetry_period);
            }
        }
        out
    }

    /// Handles one message from the controller at `now`.
    ///
    /// Timers due at or before `now` must already have been run via
    /// [`Mcu::advance`].
    pub fn handle(&mut self, msg: &LinkMessage, now: SimTime) -> Vec<LinkMessage> {
        let mut out = Vec::new();
        match *msg {
            LinkMessage::Detected { class } => {
                let (cmd, _) = self.cfg.routing.route_for(class);
                let contact = matches!(
                    self.servos[cmd.servo.slot()],
                    ServoState::Swinging { contact: true, .. }
                );
                self.servos[cmd.servo.slot()] = ServoState::Swinging {
                    direction: cmd.direction,
                    done_at: now + self.cfg.actuation,
                    contact,
                };
                out.push(LinkMessage::Ack { ref_type: msg_type::DETECTED });
            }
            LinkMessage::StopAll => {
                self.servos = [ServoState::Idle; NUM_SERVOS];
                out.push(LinkMessage::Ack { ref_type: msg_type::STOP_ALL });
            }
            LinkMessage::Dump { bin } => {
                self.counts[bin.slot()] = 0;
                out.push(LinkMessage::Ack { ref_type: msg_type::DUMP });
                out.push(LinkMessage::BinCount { bin, count: 0 });
                out.push(self.level_report(bin));
            }
            LinkMessage::Belt { run } => {
                self.belt_running = run;
                out.push(LinkMessage::Ack { ref_type: msg_type::BELT });
            }
            LinkMessage::Ack { .. }
            | LinkMessage::ServoDone { .. }
            | LinkMessage::BinCount { .. }
            | LinkMessage::Level { .. } => {
                self.diagnostics.push(format!("{now}: ignored unexpected {msg}"));
            }
        }
        out
    }

    /// An item has reached the gate of `servo`.
    pub fn item_at_gate(&mut self, servo: ServoId, _now: SimTime) -> Vec<LinkMessage> {
        let slot = servo.slot();
        match self.servos[slot] {
            ServoState::Idle => Vec::new(),
            ServoState::Swinging { direction, done_at, .. } => {
                self.servos[slot] = ServoState::Swinging { direction, done_at, contact: true };
                Vec::new()
            }
            ServoState::Armed { direction } => self.deflect(slot, direction),
        }
    }

    fn deflect(&mut self, slot: usize, direction: Direction) -> Vec<LinkMessage> {
        let servo = ServoId::new(slot as u8 + 1).expect("slot in range");
        let command = ServoCommand { servo, direction };
        let bin = self.bin_for_command(command);
        let count = self.counts[bin.slot()].saturating_add(1);
        self.counts[bin.slot()] = count;
        self.servos[slot] = ServoState::Idle;
        vec![LinkMessage::ServoDone { command }, LinkMessage::BinCount { bin, count }]
    }

    fn bin_for_command(&self, command: ServoCommand) -> BinIndex {
        crate::domain::WasteClass::ALL
            .into_iter()
            .map(|c| self.cfg.routing.route_for(c))
            .find(|(cmd, _)| *cmd == command)
            .map(|(_, bin)| bin)
            .expect("routing covers every servo command")
    }

    fn level_report(&self, bin: BinIndex) -> LinkMessage {
        LinkMessage::Level { bin, distance_mm: self.bin_state(bin).measured_distance_mm() }
    }
}

/// Functional form: runs timers up to `now`, then handles `incoming`.
pub fn mcu_step(mut mcu: Mcu, incoming: &LinkMessage, now: SimTime) -> (Mcu, Vec<LinkMessage>) {
    let mut out: Vec<LinkMessage> = mcu.advance(now).into_iter().map(|(_, m)| m).collect();
    out.extend(mcu.handle(incoming, now));
    (mcu, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::WasteClass;

    fn quiet() -> Mcu {
        Mcu::new(McuConfig { telemetry_period: SimTime::ZERO, ..McuConfig::default() })
    }

    fn bin(i: u8) -> BinIndex {
        BinIndex::new(i).unwrap()
    }

    #[test]
    fn metal_swing_reports_servo_and_count() {
        let mut mcu = quiet();
        let acks = mcu.handle(&LinkMessage::Detected { class: WasteClass::Metal }, SimTime::ZERO);
        assert_eq!(acks, vec![LinkMessage::Ack { ref_type: msg_type::DETECTED }]);
        assert!(mcu.item_at_gate(ServoId::new(1).unwrap(), SimTime::from_micros(500_000)).is_empty());
        assert!(mcu.advance(SimTime::from_micros(999_999)).is_empty());
        let out = mcu.advance(SimTime::from_secs(1));
        let ccw1 = ServoCommand::new(1, Direction::Ccw).unwrap();
        assert_eq!(
            out,
            vec![
                (SimTime::from_secs(1), LinkMessage::ServoDone { command: ccw1 }),
                (SimTime::from_secs(1), LinkMessage::BinCount { bin: bin(2), count: 1 }),
            ]
        );
        assert_eq!(mcu.servo(ServoId::new(1).unwrap()), ServoState::Idle);
    }

    #[test]
    fn armed_gate_deflects_on_contact() {
        let mut mcu = quiet();
        mcu.handle(&LinkMessage::Detected { class: WasteClass::Organic }, SimTime::ZERO);
        assert!(mcu.advance(SimTime::from_secs(2)).is_empty());
        let s2 = ServoId::new(2).unwrap();
        assert_eq!(mcu.servo(s2), ServoState::Armed { direction: Direction::Ccw });
        let out = mcu.item_at_gate(s2, SimTime::from_secs(5));
        assert_eq!(out[1], LinkMessage::BinCount { bin: bin(4), count: 1 });
    }

    #[test]
    fn dump_resets_count() {
        let mut mcu = quiet();
        mcu.counts[4] = 7;
        let out = mcu.handle(&LinkMessage::Dump { bin: bin(5) }, SimTime::ZERO);
        assert!(out.contains(&LinkMessage::BinCount { bin: bin(5), count: 0 }));
        assert!(out.contains(&LinkMessage::Level { bin: bin(5), distance_mm: 500 }));
        assert_eq!(mcu.count(bin(5)), 0);
    }

    #[test]
    fn stop_all_cancels_pending_swing() {
        let mut mcu = quiet();
        mcu.handle(&LinkMessage::Detected { class: WasteClass::Glass }, SimTime::ZERO);
        mcu.item_at_gate(ServoId::new(2).unwrap(), SimTime::from_micros(10));
        mcu.handle(&LinkMessage::StopAll, SimTime::from_micros(20));
        let out = mcu.advance(SimTime::from_secs(100));
        assert!(out.is_empty());
        assert_eq!(mcu.next_deadline(), None);
        assert_eq!(mcu.counts(), [0; 6]);
    }

    #[test]
    fn telemetry_reports_every_bin_each_period() {
        let mut mcu = Mcu::new(McuConfig::default());
        let out = mcu.advance(SimTime::from_micros(2_500_000));
        assert_eq!(out.len(), 18);
        assert!(out.iter().all(|(_, m)| matches!(m, LinkMessage::Level { distance_mm: 500, .. })));
        assert_eq!(out[17].0, SimTime::from_secs(2));
        assert_eq!(mcu.next_deadline(), Some(SimTime::from_secs(3)));
    }

    #[test]
    fn unexpected_messages_are_ignored() {
        let mut mcu = quiet();
        let out = mcu.handle(&LinkMessage::BinCount { bin: bin(1), count: 9 }, SimTime::ZERO);
        assert!(out.is_empty());
        assert_eq!(mcu.count(bin(1)), 0);
        assert_eq!(mcu.diagnostics().len(), 1);
    }

    #[test]
    fn functional_step_runs_timers_first() {
        let mcu = quiet();
        let (mcu, _) = mcu_step(mcu, &LinkMessage::Detected { class: WasteClass::Plastic }, SimTime::ZERO);
        let (mut mcu, _) = mcu_step(mcu, &LinkMessage::Belt { run: true }, SimTime::from_secs(3));
        assert_eq!(mcu.servo(ServoId::new(1).unwrap()), ServoState::Armed { direction: Direction::Cw });
        let out = mcu.item_at_gate(ServoId::new(1).unwrap(), SimTime::from_secs(4));
        assert_eq!(out[1], LinkMessage::BinCount { bin: bin(1), count: 1 });
        assert!(mcu.belt_running());
    }
}
