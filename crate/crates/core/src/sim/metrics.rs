//! Run metrics derived purely from the event stream.
//!
//! The live engine and trace replay feed the same accumulator, so both report
//! identical numbers for the same events.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{RoutingTable, WasteClass, NUM_CLASSES};
use crate::sim::event::{EventKind, ItemId, SimEvent};
use crate::telemetry::DeliveryState;
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: WasteClass,
    pub presented: u64,
    pub correctly_binned: u64,
    pub misbinned: u64,
    pub rejected: u64,
    /// Correctly binned over presented, percent.
    pub accuracy_percent: f64,
    /// Mean detection latency over items with a prediction, seconds.
    pub mean_detection_latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub classes: Vec<ClassMetrics>,
    pub presented: u64,
    pub binned: u64,
    pub correctly_binned: u64,
    pub rejected: u64,
    pub in_flight: u64,
    pub mean_cycle_time_s: f64,
    pub throughput_per_hour: f64,
    pub duration_s: f64,
    pub notifications_sent: u64,
    pub notifications_failed: u64,
}

impl SimMetrics {
    pub fn class(&self, class: WasteClass) -> &ClassMetrics {
        &self.classes[class.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("event {seq}: {message}")]
pub struct InconsistentEvent {
    pub seq: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
struct ItemRecord {
    class: Option<WasteClass>,
    arrived: SimTime,
    predicted: Option<Option<WasteClass>>,
    done: bool,
}

#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    routing: RoutingTable,
    items: BTreeMap<ItemId, ItemRecord>,
    presented: [u64; NUM_CLASSES],
    correct: [u64; NUM_CLASSES],
    misbinned: [u64; NUM_CLASSES],
    rejected: [u64; NUM_CLASSES],
    latency_us: [u128; NUM_CLASSES],
    latency_n: [u64; NUM_CLASSES],
    cycle_us: u128,
    last_time: SimTime,
    last_seq: Option<u64>,
    sent: u64,
    failed: u64,
}

impl MetricsAccumulator {
    pub fn new(routing: RoutingTable) -> Self {
        MetricsAccumulator {
            routing,
            items: BTreeMap::new(),
            presented: [0; NUM_CLASSES],
            correct: [0; NUM_CLASSES],
            misbinned: [0; NUM_CLASSES],
            rejected: [0; NUM_CLASSES],
            latency_us: [0; NUM_CLASSES],
            latency_n: [0; NUM_CLASSES],
            cycle_us: 0,
            last_time: SimTime::ZERO,
            last_seq: None,
            sent: 0,
            failed: 0,
        }
    }

    /// Folds one event in, checking that it is consistent with its prefix.
    pub fn feed(&mut self, e: &SimEvent) -> Result<(), InconsistentEvent> {
        let fail = |message: String| Err(InconsistentEvent { seq: e.seq, message });
        if let Some(prev) = self.last_seq {
            if e.seq <= prev {
                return fail(format!("sequence number not increasing after {prev}"));
            }
        }
        if e.time < self.last_time {
            return fail(format!("time {} before previous event at {}", e.time, self.last_time));
        }
        if let Some(id) = e.kind.item() {
            let known = self.items.get(&id);
            let arriving = matches!(e.kind, EventKind::ItemArrived { .. });
            match (known, arriving) {
                (Some(_), true) => return fail(format!("item {id} arrived twice")),
                (None, false) => return fail(format!("item {id} used before arriving")),
                (Some(r), false) if r.done => return fail(format!("item {id} already left the belt")),
                _ => {}
            }
        }
        self.last_seq = Some(e.seq);
        self.last_time = e.time;

        match &e.kind {
            EventKind::ItemArrived { item, class } => {
                self.items.insert(*item, ItemRecord { class: Some(*class), arrived: e.time, ..Default::default() });
                self.presented[class.index()] += 1;
            }
            EventKind::Classified { item, class, predicted, latency, .. } => {
                let rec = self.items.get_mut(item).expect("checked above");
                if rec.class != Some(*class) {
                    return fail(format!("item {item} class changed to {class}"));
                }
                if rec.predicted.is_some() {
                    return fail(format!("item {item} classified twice"));
                }
                rec.predicted = Some(*predicted);
                if predicted.is_some() {
                    self.latency_us[class.index()] += u128::from(latency.as_micros());
                    self.latency_n[class.index()] += 1;
                }
            }
            EventKind::ServoFired { item, servo, direction } => {
                let rec = &self.items[item];
                let Some(Some(predicted)) = rec.predicted else {
                    return fail(format!("servo fired for item {item} without a prediction"));
                };
                let (cmd, _) = self.routing.route_for(predicted);
                if (cmd.servo, cmd.direction) != (*servo, *direction) {
                    return fail(format!("servo command ({servo}, {}) does not match route of {predicted}", direction.slug()));
                }
            }
            EventKind::ItemBinned { item, class, bin, .. } => {
                let rec = self.items.get_mut(item).expect("checked above");
                if rec.class != Some(*class) {
                    return fail(format!("item {item} binned as {class}"));
                }
                let Some(Some(predicted)) = rec.predicted else {
                    return fail(format!("item {item} binned without a prediction"));
                };
                if self.routing.bin_for(predicted) != *bin {
                    return fail(format!("item {item} predicted {predicted} but landed in bin {bin}"));
                }
                rec.done = true;
                self.cycle_us += u128::from((e.time - rec.arrived).as_micros());
                if self.routing.bin_for(*class) == *bin {
                    self.correct[class.index()] += 1;
                } else {
                    self.misbinned[class.index()] += 1;
                }
            }
            EventKind::ItemRejected { item, class, .. } => {
                let rec = self.items.get_mut(item).expect("checked above");
                if rec.class != Some(*class) {
                    return fail(format!("item {item} rejected as {class}"));
                }
                rec.done = true;
                self.rejected[class.index()] += 1;
            }
            EventKind::NotificationSent { state, .. } => match state {
                DeliveryState::Sent => self.sent += 1,
                DeliveryState::Failed => self.failed += 1,
                _ => {}
            },
            _ => {}
        }
        Ok(())
    }

    pub fn metrics(&self) -> SimMetrics {
        let classes: Vec<ClassMetrics> = WasteClass::ALL
            .iter()
            .map(|&class| {
                let i = class.index();
                let presented = self.presented[i];
                ClassMetrics {
                    class,
                    presented,
                    correctly_binned: self.correct[i],
                    misbinned: self.misbinned[i],
                    rejected: self.rejected[i],
                    accuracy_percent: ratio(self.correct[i] as f64 * 100.0, presented),
                    mean_detection_latency_s: ratio(self.latency_us[i] as f64 / 1e6, self.latency_n[i]),
                }
            })
            .collect();
        let presented: u64 = self.presented.iter().sum();
        let correctly_binned: u64 = self.correct.iter().sum();
        let binned = correctly_binned + self.misbinned.iter().sum::<u64>();
        let rejected: u64 = self.rejected.iter().sum();
        let duration_s = self.last_time.as_secs_f64();
        SimMetrics {
            classes,
            presented,
            binned,
            correctly_binned,
            rejected,
            in_flight: presented - binned - rejected,
            mean_cycle_time_s: ratio(self.cycle_us as f64 / 1e6, binned),
            throughput_per_hour: if duration_s > 0.0 { binned as f64 * 3600.0 / duration_s } else { 0.0 },
            duration_s,
            notifications_sent: self.sent,
            notifications_failed: self.failed,
        }
    }
}

fn ratio(total: f64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Fixed-width summary table, one row per class in class order.
pub fn format_table(m: &SimMetrics) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:>11} {:>10} {:>12} {:>10}\n",
        "Categories", "Test Images", "Classified", "Accuracy (%)", "Time (Sec)"
    ));
    for c in &m.classes {
        out.push_str(&format!(
            "{:<14} {:>11} {:>10} {:>12.2} {:>10.2}\n",
            c.class.label(),
            c.presented,
            c.correctly_binned,
            c.accuracy_percent,
            c.mean_detection_latency_s
        ));
    }
    out.push_str(&format!(
        "binned {} rejected {} in flight {} | mean cycle {:.2} s | throughput {:.1} items/h | notifications sent {} failed {}\n",
        m.binned,
        m.rejected,
        m.in_flight,
        m.mean_cycle_time_s,
        m.throughput_per_hour,
        m.notifications_sent,
        m.notifications_failed
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::BinIndex;

    fn ev(t: u64, seq: u64, kind: EventKind) -> SimEvent {
        SimEvent { time: SimTime::from_secs(t), seq, kind }
    }

    fn lifecycle(predicted: Option<WasteClass>) -> Vec<SimEvent> {
        let class = WasteClass::Glass;
        let mut v = vec![
            ev(0, 0, EventKind::ItemArrived { item: 0, class }),
            ev(16, 1, EventKind::Classified { item: 0, class, predicted, peak: 0.9, latency: SimTime::from_secs(6) }),
        ];
        if let Some(p) = predicted {
            let bin = RoutingTable::default().bin_for(p);
            v.push(ev(20, 2, EventKind::ItemBinned { item: 0, class, bin, count: 1 }));
        } else {
            v.push(ev(40, 2, EventKind::ItemRejected { item: 0, class, rejects: 1 }));
        }
        v
    }

    fn run(events: &[SimEvent]) -> Result<SimMetrics, InconsistentEvent> {
        let mut acc = MetricsAccumulator::new(RoutingTable::default());
        for e in events {
            acc.feed(e)?;
        }
        Ok(acc.metrics())
    }

    #[test]
    fn correct_item() {
        let m = run(&lifecycle(Some(WasteClass::Glass))).unwrap();
        let g = m.class(WasteClass::Glass);
        assert_eq!((g.presented, g.correctly_binned, g.misbinned), (1, 1, 0));
        assert_eq!(g.accuracy_percent, 100.0);
        assert_eq!(g.mean_detection_latency_s, 6.0);
        assert_eq!(m.mean_cycle_time_s, 20.0);
        assert_eq!(m.throughput_per_hour, 180.0);
    }

    #[test]
    fn misclassified_and_rejected_items() {
        let m = run(&lifecycle(Some(WasteClass::Metal))).unwrap();
        assert_eq!(m.class(WasteClass::Glass).misbinned, 1);
        assert_eq!(m.correctly_binned, 0);
        let m = run(&lifecycle(None)).unwrap();
        assert_eq!((m.rejected, m.binned, m.in_flight), (1, 0, 0));
        // unavailable results do not count toward detection latency
        assert_eq!(m.class(WasteClass::Glass).mean_detection_latency_s, 0.0);
    }

    #[test]
    fn empty_stream_is_all_zero() {
        let m = run(&[]).unwrap();
        assert!(m.classes.iter().all(|c| c.presented == 0 && c.accuracy_percent == 0.0));
        assert_eq!((m.binned, m.duration_s, m.throughput_per_hour), (0, 0.0, 0.0));
    }

    #[test]
    fn inconsistencies_are_reported() {
        let mut v = lifecycle(Some(WasteClass::Glass));
        if let EventKind::ItemBinned { bin, .. } = &mut v[2].kind {
            *bin = BinIndex::new(1).unwrap();
        }
        assert!(run(&v).unwrap_err().message.contains("landed in bin 1"));

        let mut v = lifecycle(Some(WasteClass::Glass));
        v[1].seq = 0;
        assert!(run(&v).is_err());

        let v = vec![ev(0, 0, EventKind::PresenceDetected { item: 3 })];
        assert!(run(&v).is_err());
    }

    #[test]
    fn table_has_six_rows_in_class_order() {
        let t = format_table(&run(&lifecycle(Some(WasteClass::Glass))).unwrap());
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("Categories"));
        assert!(lines[0].contains("Test Images") && lines[0].contains("Accuracy (%)") && lines[0].contains("Time (Sec)"));
        for (line, class) in lines[1..7].iter().zip(WasteClass::ALL) {
            assert!(line.starts_with(class.label()), "{line}");
        }
    }
}
