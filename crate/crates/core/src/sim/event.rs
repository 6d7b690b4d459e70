//! Simulation events and their line-oriented trace encoding.
//!
//! One event per line:
//!
//! ```text
//! <time> <seq> <Kind> key=value key=value ...
//! ```
//!
//! `time` is seconds with exactly six decimals, `seq` a strictly increasing
//! integer, and the attribute order is fixed per kind, so identical runs give
//! byte-identical files. Lines starting with `#` are headers.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::{BinIndex, Direction, RoutingSpec, RoutingTable, ServoId, WasteClass};
use crate::telemetry::DeliveryState;
use crate::time::SimTime;

pub type ItemId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PauseReason {
    /// Camera capture and classification.
    Capture,
    /// Operator request.
    Operator,
    /// Waiting for a servo swing to finish before deflecting an item.
    Hold,
}

impl PauseReason {
    pub fn slug(self) -> &'static str {
        match self {
            PauseReason::Capture => "capture",
            PauseReason::Operator => "operator",
            PauseReason::Hold => "hold",
        }
    }
}

impl FromStr for PauseReason {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "capture" => Ok(PauseReason::Capture),
            "operator" => Ok(PauseReason::Operator),
            "hold" => Ok(PauseReason::Hold),
            _ => Err(format!("unknown pause reason `{s}`")),
        }
    }
}

/// Commands an operator can inject into a running simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "lowercase")]
pub enum SimCommand {
    Dump { bin: BinIndex },
    Pause,
    Resume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum EventKind {
    ItemArrived { item: ItemId, class: WasteClass },
    PresenceDetected { item: ItemId },
    BeltPaused { reason: PauseReason, item: Option<ItemId>, running: bool },
    ImageCaptured { item: ItemId, image: String },
    Classified {
        item: ItemId,
        class: WasteClass,
        /// `None` when no classification was available.
        predicted: Option<WasteClass>,
        peak: f64,
        latency: SimTime,
    },
    BeltResumed { reason: PauseReason, item: Option<ItemId>, running: bool },
    ServoFired { item: ItemId, servo: ServoId, direction: Direction },
    ItemBinned { item: ItemId, class: WasteClass, bin: BinIndex, count: u16 },
    ItemRejected { item: ItemId, class: WasteClass, rejects: u64 },
    LevelSample { bin: BinIndex, distance_mm: u16, level: f64 },
    NotificationSent { notification: u64, bin: BinIndex, level: f64, attempt: u32, state: DeliveryState },
    OperatorCommand { command: SimCommand, client: Option<String> },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::ItemArrived { .. } => "ItemArrived",
            EventKind::PresenceDetected { .. } => "PresenceDetected",
            EventKind::BeltPaused { .. } => "BeltPaused",
            EventKind::ImageCaptured { .. } => "ImageCaptured",
            EventKind::Classified { .. } => "Classified",
            EventKind::BeltResumed { .. } => "BeltResumed",
            EventKind::ServoFired { .. } => "ServoFired",
            EventKind::ItemBinned { .. } => "ItemBinned",
            EventKind::ItemRejected { .. } => "ItemRejected",
            EventKind::LevelSample { .. } => "LevelSample",
            EventKind::NotificationSent { .. } => "NotificationSent",
            EventKind::OperatorCommand { .. } => "OperatorCommand",
        }
    }

    pub fn item(&self) -> Option<ItemId> {
        match self {
            EventKind::ItemArrived { item, .. }
            | EventKind::PresenceDetected { item }
            | EventKind::ImageCaptured { item, .. }
            | EventKind::Classified { item, .. }
            | EventKind::ServoFired { item, .. }
            | EventKind::ItemBinned { item, .. }
            | EventKind::ItemRejected { item, .. } => Some(*item),
            EventKind::BeltPaused { item, .. } | EventKind::BeltResumed { item, .. } => *item,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: SimTime,
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

fn opt_item(v: Option<ItemId>) -> String {
    v.map_or_else(|| "-".to_string(), |i| i.to_string())
}

impl fmt::Display for SimEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.time, self.seq, self.kind.name())?;
        match &self.kind {
            EventKind::ItemArrived { item, class } => write!(f, " item={item} class={class}"),
            EventKind::PresenceDetected { item } => write!(f, " item={item}"),
            EventKind::BeltPaused { reason, item, running }
            | EventKind::BeltResumed { reason, item, running } => write!(
                f,
                " reason={} item={} running={}",
                reason.slug(),
                opt_item(*item),
                u8::from(*running)
            ),
            EventKind::ImageCaptured { item, image } => write!(f, " item={item} image={image}"),
            EventKind::Classified { item, class, predicted, peak, latency } => write!(
                f,
                " item={item} class={class} predicted={} peak={peak} latency={latency}",
                predicted.map_or("unknown", |p| p.slug())
            ),
            EventKind::ServoFired { item, servo, direction } => {
                write!(f, " item={item} servo={servo} direction={}", direction.slug())
            }
            EventKind::ItemBinned { item, class, bin, count } => {
                write!(f, " item={item} class={class} bin={bin} count={count}")
            }
            EventKind::ItemRejected { item, class, rejects } => {
                write!(f, " item={item} class={class} rejects={rejects}")
            }
            EventKind::LevelSample { bin, distance_mm, level } => {
                write!(f, " bin={bin} distance_mm={distance_mm} level={level}")
            }
            EventKind::NotificationSent { notification, bin, level, attempt, state } => write!(
                f,
                " notification={notification} bin={bin} level={level} attempt={attempt} state={}",
                state.slug()
            ),
            EventKind::OperatorCommand { command, client } => {
                match command {
                    SimCommand::Dump { bin } => write!(f, " cmd=dump bin={bin}")?,
                    SimCommand::Pause => f.write_str(" cmd=pause")?,
                    SimCommand::Resume => f.write_str(" cmd=resume")?,
                }
                write!(f, " client={}", client.as_deref().unwrap_or("-"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ParseEventError(pub String);

struct Attrs<'a> {
    pairs: Vec<(&'a str, &'a str)>,
    next: usize,
}

impl<'a> Attrs<'a> {
    fn new(parts: impl Iterator<Item = &'a str>) -> Result<Self, ParseEventError> {
        let pairs = parts
            .map(|p| p.split_once('=').ok_or_else(|| ParseEventError(format!("attribute `{p}` lacks `=`"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Attrs { pairs, next: 0 })
    }

    /// Attributes must appear in canonical order.
    fn raw(&mut self, key: &str) -> Result<&'a str, ParseEventError> {
        match self.pairs.get(self.next) {
            Some((k, v)) if *k == key => {
                self.next += 1;
                Ok(v)
            }
            Some((k, _)) => Err(ParseEventError(format!("expected attribute `{key}`, found `{k}`"))),
            None => Err(ParseEventError(format!("missing attribute `{key}`"))),
        }
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<T, ParseEventError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key)?;
        raw.parse().map_err(|e| ParseEventError(format!("bad `{key}` value `{raw}`: {e}")))
    }

    fn opt_item(&mut self, key: &str) -> Result<Option<ItemId>, ParseEventError> {
        match self.raw(key)? {
            "-" => Ok(None),
            v => v.parse().map(Some).map_err(|_| ParseEventError(format!("bad `{key}` value `{v}`"))),
        }
    }

    fn flag(&mut self, key: &str) -> Result<bool, ParseEventError> {
        match self.raw(key)? {
            "0" => Ok(false),
            "1" => Ok(true),
            v => Err(ParseEventError(format!("bad `{key}` value `{v}`"))),
        }
    }

    fn bin(&mut self) -> Result<BinIndex, ParseEventError> {
        let v: u8 = self.get("bin")?;
        BinIndex::new(v).ok_or_else(|| ParseEventError(format!("bin {v} outside 1..=6")))
    }

    fn finish(self) -> Result<(), ParseEventError> {
        match self.pairs.get(self.next) {
            Some((k, _)) => Err(ParseEventError(format!("unexpected attribute `{k}`"))),
            None => Ok(()),
        }
    }
}

impl FromStr for SimEvent {
    type Err = ParseEventError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let mut parts = line.split(' ');
        let err = |m: &str| ParseEventError(m.to_string());
        let time: SimTime = parts
            .next()
            .ok_or_else(|| err("empty line"))?
            .parse()
            .map_err(|e: crate::time::ParseTimeError| ParseEventError(e.to_string()))?;
        let seq: u64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("missing or invalid sequence number"))?;
        let name = parts.next().ok_or_else(|| err("missing event kind"))?;
        let mut a = Attrs::new(parts)?;
        let kind = match name {
            "ItemArrived" => EventKind::ItemArrived { item: a.get("item")?, class: a.get("class")? },
            "PresenceDetected" => EventKind::PresenceDetected { item: a.get("item")? },
            "BeltPaused" => EventKind::BeltPaused {
                reason: a.get("reason")?,
                item: a.opt_item("item")?,
                running: a.flag("running")?,
            },
            "BeltResumed" => EventKind::BeltResumed {
                reason: a.get("reason")?,
                item: a.opt_item("item")?,
                running: a.flag("running")?,
            },
            "ImageCaptured" => EventKind::ImageCaptured { item: a.get("item")?, image: a.raw("image")?.to_string() },
            "Classified" => EventKind::Classified {
                item: a.get("item")?,
                class: a.get("class")?,
                predicted: match a.raw("predicted")? {
                    "unknown" => None,
                    v => Some(v.parse().map_err(|e: crate::domain::UnknownClass| ParseEventError(e.to_string()))?),
                },
                peak: a.get("peak")?,
                latency: a.get("latency")?,
            },
            "ServoFired" => EventKind::ServoFired {
                item: a.get("item")?,
                servo: {
                    let v: u8 = a.get("servo")?;
                    ServoId::new(v).ok_or_else(|| ParseEventError(format!("servo {v} outside 1..=3")))?
                },
                direction: a.get("direction")?,
            },
            "ItemBinned" => EventKind::ItemBinned {
                item: a.get("item")?,
                class: a.get("class")?,
                bin: a.bin()?,
                count: a.get("count")?,
            },
            "ItemRejected" => EventKind::ItemRejected {
                item: a.get("item")?,
                class: a.get("class")?,
                rejects: a.get("rejects")?,
            },
            "LevelSample" => EventKind::LevelSample {
                bin: a.bin()?,
                distance_mm: a.get("distance_mm")?,
                level: a.get("level")?,
            },
            "NotificationSent" => EventKind::NotificationSent {
                notification: a.get("notification")?,
                bin: a.bin()?,
                level: a.get("level")?,
                attempt: a.get("attempt")?,
                state: a.get("state")?,
            },
            "OperatorCommand" => {
                let command = match a.raw("cmd")? {
                    "dump" => SimCommand::Dump { bin: a.bin()? },
                    "pause" => SimCommand::Pause,
                    "resume" => SimCommand::Resume,
                    other => return Err(ParseEventError(format!("unknown operator command `{other}`"))),
                };
                let client = match a.raw("client")? {
                    "-" => None,
                    c => Some(c.to_string()),
                };
                EventKind::OperatorCommand { command, client }
            }
            other => return Err(ParseEventError(format!("unknown event kind `{other}`"))),
        };
        a.finish()?;
        Ok(SimEvent { time, seq, kind })
    }
}

pub const TRACE_FORMAT: &str = "convowaste-trace";
pub const TRACE_VERSION: u32 = 1;

/// First line of a trace file: format version, random stream, seed,
/// classifier and routing table.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceHeader {
    pub rng: String,
    pub seed: u64,
    pub classifier: String,
    pub routing: RoutingTable,
}

impl fmt::Display for TraceHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut routes = String::new();
        for class in WasteClass::ALL {
            let (cmd, bin) = self.routing.route_for(class);
            if !routes.is_empty() {
                routes.push(',');
            }
            let _ = write!(routes, "{class}:{}:{}:{bin}", cmd.servo, cmd.direction.slug());
        }
        write!(
            f,
            "# {TRACE_FORMAT} v={TRACE_VERSION} rng={} seed={} classifier={} routing={routes}",
            self.rng, self.seed, self.classifier
        )
    }
}

impl FromStr for TraceHeader {
    type Err = ParseEventError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let rest = line
            .strip_prefix("# ")
            .and_then(|l| l.strip_prefix(TRACE_FORMAT))
            .ok_or_else(|| ParseEventError("not a trace header".into()))?;
        let mut a = Attrs::new(rest.split_whitespace())?;
        let version: u32 = a.get("v")?;
        if version != TRACE_VERSION {
            return Err(ParseEventError(format!("unsupported trace version {version}")));
        }
        let rng = a.raw("rng")?.to_string();
        let seed = a.get("seed")?;
        let classifier = a.raw("classifier")?.to_string();
        let routes = a.raw("routing")?;
        a.finish()?;

        let mut spec = RoutingSpec { classes: Default::default(), bins: Vec::new() };
        for entry in routes.split(',') {
            let fields: Vec<&str> = entry.split(':').collect();
            let bad = || ParseEventError(format!("bad routing entry `{entry}`"));
            let [class, servo, dir, bin] = fields[..] else { return Err(bad()) };
            let class: WasteClass = class.parse().map_err(|_| bad())?;
            let servo = servo.parse().ok().and_then(ServoId::new).ok_or_else(bad)?;
            let direction: Direction = dir.parse().map_err(|_| bad())?;
            let bin = bin.parse().ok().and_then(BinIndex::new).ok_or_else(bad)?;
            spec.classes.insert(class, crate::domain::ServoCommand { servo, direction });
            spec.bins.push(crate::domain::CommandBin { servo, direction, bin });
        }
        let routing = crate::domain::validate_routing_table(&spec).map_err(|e| ParseEventError(e.to_string()))?;
        Ok(TraceHeader { rng, seed, classifier, routing })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(kind: EventKind) -> SimEvent {
        SimEvent { time: SimTime::from_micros(13_000_001), seq: 7, kind }
    }

    #[test]
    fn canonical_lines() {
        let e = ev(EventKind::Classified {
            item: 0,
            class: WasteClass::Plastic,
            predicted: Some(WasteClass::Plastic),
            peak: 1.0,
            latency: SimTime::from_secs(3),
        });
        assert_eq!(
            e.to_string(),
            "13.000001 7 Classified item=0 class=plastic predicted=plastic peak=1 latency=3.000000"
        );
        let e = ev(EventKind::BeltPaused { reason: PauseReason::Operator, item: None, running: false });
        assert_eq!(e.to_string(), "13.000001 7 BeltPaused reason=operator item=- running=0");
    }

    #[test]
    fn every_kind_round_trips() {
        let bin = BinIndex::new(3).unwrap();
        let kinds = vec![
            EventKind::ItemArrived { item: 1, class: WasteClass::EWaste },
            EventKind::PresenceDetected { item: 1 },
            EventKind::BeltPaused { reason: PauseReason::Capture, item: Some(1), running: false },
            EventKind::ImageCaptured { item: 1, image: "img-000001".into() },
            EventKind::Classified {
                item: 1,
                class: WasteClass::EWaste,
                predicted: None,
                peak: 0.0,
                latency: SimTime::from_micros(250_000),
            },
            EventKind::BeltResumed { reason: PauseReason::Hold, item: Some(1), running: true },
            EventKind::ServoFired { item: 1, servo: ServoId::new(2).unwrap(), direction: Direction::Ccw },
            EventKind::ItemBinned { item: 1, class: WasteClass::Glass, bin, count: 300 },
            EventKind::ItemRejected { item: 1, class: WasteClass::Glass, rejects: 2 },
            EventKind::LevelSample { bin, distance_mm: 150, level: 70.0 },
            EventKind::NotificationSent {
                notification: 4,
                bin,
                level: 80.0,
                attempt: 2,
                state: DeliveryState::Retrying,
            },
            EventKind::OperatorCommand { command: SimCommand::Dump { bin }, client: Some("c7".into()) },
            EventKind::OperatorCommand { command: SimCommand::Resume, client: None },
        ];
        for kind in kinds {
            let e = ev(kind);
            let line = e.to_string();
            assert_eq!(line.parse::<SimEvent>().unwrap(), e, "{line}");
        }
    }

    #[test]
    fn rejects_bad_lines() {
        for line in [
            "",
            "1.0 x ItemArrived item=1 class=plastic",
            "1.0 1 Teleported item=1",
            "1.0 1 ItemArrived class=plastic item=1",
            "1.0 1 ItemArrived item=1 class=plastic extra=1",
            "1.0 1 ItemBinned item=1 class=plastic bin=7 count=1",
        ] {
            assert!(line.parse::<SimEvent>().is_err(), "{line}");
        }
    }

    #[test]
    fn header_round_trips() {
        let h = TraceHeader {
            rng: "chacha8".into(),
            seed: 99,
            classifier: "perfect".into(),
            routing: RoutingTable::default(),
        };
        let line = h.to_string();
        assert!(line.starts_with("# convowaste-trace v=1 rng=chacha8 seed=99 classifier=perfect routing=plastic:1:cw:1,"));
        assert_eq!(line.parse::<TraceHeader>().unwrap(), h);
    }
}
