//! Waste taxonomy, servo routing, bin geometry and machine configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::time::SimTime;

/// The six waste categories the machine sorts, in wire-code order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WasteClass {
    Plastic,
    Metal,
    Glass,
    Organic,
    Medical,
    #[serde(rename = "ewaste", alias = "e-waste")]
    EWaste,
}

pub const NUM_CLASSES: usize = 6;

impl WasteClass {
    pub const ALL: [WasteClass; NUM_CLASSES] = [
        WasteClass::Plastic,
        WasteClass::Metal,
        WasteClass::Glass,
        WasteClass::Organic,
        WasteClass::Medical,
        WasteClass::EWaste,
    ];

    /// Stable wire code, 0x01..=0x06.
    pub const fn code(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn from_code(code: u8) -> Option<WasteClass> {
        match code {
            1..=6 => Some(Self::ALL[usize::from(code) - 1]),
            _ => None,
        }
    }

    /// Zero-based ordinal.
    pub const fn index(self) -> usize {
        match self {
            WasteClass::Plastic => 0,
            WasteClass::Metal => 1,
            WasteClass::Glass => 2,
            WasteClass::Organic => 3,
            WasteClass::Medical => 4,
            WasteClass::EWaste => 5,
        }
    }

    pub const fn slug(self) -> &'static str {
        match self {
            WasteClass::Plastic => "plastic",
            WasteClass::Metal => "metal",
            WasteClass::Glass => "glass",
            WasteClass::Organic => "organic",
            WasteClass::Medical => "medical",
            WasteClass::EWaste => "ewaste",
        }
    }

    /// Human-readable label used in reports.
    pub const fn label(self) -> &'static str {
        match self {
            WasteClass::Plastic => "Plastic",
            WasteClass::Metal => "Metal",
            WasteClass::Glass => "Glass",
            WasteClass::Organic => "Organic",
            WasteClass::Medical => "Medical waste",
            WasteClass::EWaste => "E-waste",
        }
    }
}

impl fmt::Display for WasteClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown waste class `{0}`")]
pub struct UnknownClass(pub String);

impl FromStr for WasteClass {
    type Err = UnknownClass;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        WasteClass::ALL
            .into_iter()
            .find(|c| c.slug() == lower || (lower == "e-waste" && *c == WasteClass::EWaste))
            .ok_or_else(|| UnknownClass(s.to_string()))
    }
}

/// Behavioural parameters of the classifier for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub class: WasteClass,
    /// Probability that an item of this class is predicted correctly.
    pub accuracy: f64,
    /// Seconds from image capture to prediction.
    pub detection_latency_s: f64,
}

impl ClassProfile {
    pub fn latency(&self) -> SimTime {
        SimTime::from_secs_f64(self.detection_latency_s)
    }
}

/// One profile per class, indexed by [`WasteClass::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet([ClassProfile; NUM_CLASSES]);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProfileError {
    #[error("no profile for class {0}")]
    Missing(WasteClass),
    #[error("duplicate profile for class {0}")]
    Duplicate(WasteClass),
    #[error("accuracy {accuracy} for class {class} is outside [0, 1]")]
    Accuracy { class: WasteClass, accuracy: f64 },
    #[error("detection latency {latency} s for class {class} must be positive")]
    Latency { class: WasteClass, latency: f64 },
}

impl ProfileSet {
    pub fn new(profiles: &[ClassProfile]) -> Result<Self, ProfileError> {
        let mut slots: [Option<ClassProfile>; NUM_CLASSES] = [None; NUM_CLASSES];
        for p in profiles {
            if !(0.0..=1.0).contains(&p.accuracy) {
                return Err(ProfileError::Accuracy { class: p.class, accuracy: p.accuracy });
            }
            if !(p.detection_latency_s > 0.0 && p.detection_latency_s.is_finite()) {
                return Err(ProfileError::Latency { class: p.class, latency: p.detection_latency_s });
            }
            let slot = &mut slots[p.class.index()];
            if slot.is_some() {
                return Err(ProfileError::Duplicate(p.class));
            }
            *slot = Some(*p);
        }
        let mut out = TABLE_II;
        for class in WasteClass::ALL {
            out[class.index()] = slots[class.index()].ok_or(ProfileError::Missing(class))?;
        }
        Ok(ProfileSet(out))
    }

    pub fn get(&self, class: WasteClass) -> &ClassProfile {
        &self.0[class.index()]
    }

    pub fn as_slice(&self) -> &[ClassProfile] {
        &self.0
    }
}

impl Default for ProfileSet {
    fn default() -> Self {
        ProfileSet(TABLE_II)
    }
}

// Detection results measured on 50 test images per class: accuracy is
// classified / 50 and latency is the reported detection time.
const TABLE_II: [ClassProfile; NUM_CLASSES] = [
    ClassProfile { class: WasteClass::Plastic, accuracy: 0.94, detection_latency_s: 3.0 },
    ClassProfile { class: WasteClass::Metal, accuracy: 0.94, detection_latency_s: 5.0 },
    ClassProfile { class: WasteClass::Glass, accuracy: 0.90, detection_latency_s: 6.0 },
    ClassProfile { class: WasteClass::Organic, accuracy: 0.96, detection_latency_s: 6.0 },
    ClassProfile { class: WasteClass::Medical, accuracy: 0.92, detection_latency_s: 4.0 },
    ClassProfile { class: WasteClass::EWaste, accuracy: 0.88, detection_latency_s: 9.0 },
];

/// The measured per-class accuracy and detection time of the reference model.
pub fn default_class_profiles() -> Vec<ClassProfile> {
    TABLE_II.to_vec()
}

/// Swing direction of a routing servo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Cw,
    Ccw,
}

impl Direction {
    pub const fn wire(self) -> u8 {
        match self {
            Direction::Cw => 0x00,
            Direction::Ccw => 0x01,
        }
    }

    pub fn from_wire(b: u8) -> Option<Direction> {
        match b {
            0x00 => Some(Direction::Cw),
            0x01 => Some(Direction::Ccw),
            _ => None,
        }
    }

    pub const fn slug(self) -> &'static str {
        match self {
            Direction::Cw => "cw",
            Direction::Ccw => "ccw",
        }
    }
}

impl FromStr for Direction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cw" => Ok(Direction::Cw),
            "ccw" => Ok(Direction::Ccw),
            _ => Err(format!("unknown direction `{s}`")),
        }
    }
}

pub const NUM_SERVOS: usize = 3;
pub const NUM_BINS: usize = 6;

/// Servo number, 1..=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ServoId(u8);

impl ServoId {
    pub fn new(id: u8) -> Option<ServoId> {
        (1..=NUM_SERVOS as u8).contains(&id).then_some(ServoId(id))
    }

    pub const fn get(self) -> u8 {
        self.0
    }

    /// Zero-based slot.
    pub const fn slot(self) -> usize {
        self.0 as usize - 1
    }

    pub fn all() -> impl Iterator<Item = ServoId> {
        (1..=NUM_SERVOS as u8).map(ServoId)
    }
}

impl TryFrom<u8> for ServoId {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        ServoId::new(v).ok_or_else(|| format!("servo id {v} outside 1..=3"))
    }
}

impl From<ServoId> for u8 {
    fn from(v: ServoId) -> u8 {
        v.0
    }
}

impl fmt::Display for ServoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Bin number, 1..=6.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct BinIndex(u8);

impl BinIndex {
    pub fn new(id: u8) -> Option<BinIndex> {
        (1..=NUM_BINS as u8).contains(&id).then_some(BinIndex(id))
    }

    pub const fn get(self) -> u8 {
        self.0
    }

    pub const fn slot(self) -> usize {
        self.0 as usize - 1
    }

    pub fn all() -> impl Iterator<Item = BinIndex> {
        (1..=NUM_BINS as u8).map(BinIndex)
    }
}

impl TryFrom<u8> for BinIndex {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        BinIndex::new(v).ok_or_else(|| format!("bin index {v} outside 1..=6"))
    }
}

impl From<BinIndex> for u8 {
    fn from(v: BinIndex) -> u8 {
        v.0
    }
}

impl fmt::Display for BinIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ServoCommand {
    pub servo: ServoId,
    pub direction: Direction,
}

impl ServoCommand {
    pub fn new(servo: u8, direction: Direction) -> Option<ServoCommand> {
        Some(ServoCommand { servo: ServoId::new(servo)?, direction })
    }

    /// All six (servo, direction) pairs.
    pub fn all() -> impl Iterator<Item = ServoCommand> {
        ServoId::all().flat_map(|servo| {
            [Direction::Cw, Direction::Ccw].map(move |direction| ServoCommand { servo, direction })
        })
    }
}

impl fmt::Display for ServoCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.servo, self.direction.slug().to_uppercase())
    }
}

/// Unvalidated routing as it appears in configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingSpec {
    pub classes: BTreeMap<WasteClass, ServoCommand>,
    pub bins: Vec<CommandBin>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandBin {
    pub servo: ServoId,
    pub direction: Direction,
    pub bin: BinIndex,
}

impl Default for RoutingSpec {
    fn default() -> Self {
        let classes = WasteClass::ALL
            .into_iter()
            .zip(ServoCommand::all())
            .collect();
        let bins = ServoCommand::all()
            .zip(BinIndex::all())
            .map(|(cmd, bin)| CommandBin { servo: cmd.servo, direction: cmd.direction, bin })
            .collect();
        RoutingSpec { classes, bins }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RoutingViolation {
    #[error("missing class {0}")]
    MissingClass(WasteClass),
    #[error("duplicate command {command}: used by {first} and {second}")]
    DuplicateCommand { command: ServoCommand, first: WasteClass, second: WasteClass },
    #[error("duplicate bin {bin}: reached by {first} and {second}")]
    DuplicateBin { bin: BinIndex, first: ServoCommand, second: ServoCommand },
    #[error("command {0} listed twice in the bin map")]
    DuplicateBinEntry(ServoCommand),
    #[error("command {0} has no bin")]
    MissingBin(ServoCommand),
    #[error("anchor mismatch for {class}: expected {expected}, found {found}")]
    AnchorMismatch { class: WasteClass, expected: ServoCommand, found: ServoCommand },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid routing table: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct RoutingViolations(pub Vec<RoutingViolation>);

/// Validated bijection from waste class to servo command to bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingTable {
    commands: [ServoCommand; NUM_CLASSES],
    bins: [BinIndex; NUM_CLASSES],
}

/// Plastic and metal share servo 1; the flowchart fixes their directions.
const ANCHORS: [(WasteClass, ServoCommand); 2] = [
    (WasteClass::Plastic, ServoCommand { servo: ServoId(1), direction: Direction::Cw }),
    (WasteClass::Metal, ServoCommand { servo: ServoId(1), direction: Direction::Ccw }),
];

/// Checks that class → command and command → bin are both total bijections
/// and that the fixed plastic/metal anchors hold.
pub fn validate_routing_table(spec: &RoutingSpec) -> Result<RoutingTable, RoutingViolations> {
    let mut violations = Vec::new();

    let mut used: BTreeMap<ServoCommand, WasteClass> = BTreeMap::new();
    for class in WasteClass::ALL {
        match spec.classes.get(&class) {
            None => violations.push(RoutingViolation::MissingClass(class)),
            Some(cmd) => {
                if let Some(first) = used.insert(*cmd, class) {
                    violations.push(RoutingViolation::DuplicateCommand {
                        command: *cmd,
                        first,
                        second: class,
                    });
                }
            }
        }
    }

    for (class, expected) in ANCHORS {
        if let Some(found) = spec.classes.get(&class) {
            if *found != expected {
                violations.push(RoutingViolation::AnchorMismatch { class, expected, found: *found });
            }
        }
    }

    let mut bin_of: BTreeMap<ServoCommand, BinIndex> = BTreeMap::new();
    let mut owner: BTreeMap<BinIndex, ServoCommand> = BTreeMap::new();
    for entry in &spec.bins {
        let cmd = ServoCommand { servo: entry.servo, direction: entry.direction };
        if bin_of.insert(cmd, entry.bin).is_some() {
            violations.push(RoutingViolation::DuplicateBinEntry(cmd));
            continue;
        }
        if let Some(first) = owner.insert(entry.bin, cmd) {
            violations.push(RoutingViolation::DuplicateBin { bin: entry.bin, first, second: cmd });
        }
    }
    for cmd in ServoCommand::all() {
        if !bin_of.contains_key(&cmd) {
            violations.push(RoutingViolation::MissingBin(cmd));
        }
    }

    if !violations.is_empty() {
        return Err(RoutingViolations(violations));
    }

    let commands = WasteClass::ALL.map(|c| spec.classes[&c]);
    let bins = commands.map(|cmd| bin_of[&cmd]);
    Ok(RoutingTable { commands, bins })
}

impl RoutingTable {
    pub fn route_for(&self, class: WasteClass) -> (ServoCommand, BinIndex) {
        (self.commands[class.index()], self.bins[class.index()])
    }

    pub fn bin_for(&self, class: WasteClass) -> BinIndex {
        self.bins[class.index()]
    }

    /// The class routed into `bin`.
    pub fn class_for_bin(&self, bin: BinIndex) -> WasteClass {
        WasteClass::ALL
            .into_iter()
            .find(|c| self.bins[c.index()] == bin)
            .expect("validated routing is a bijection")
    }

    pub fn to_spec(&self) -> RoutingSpec {
        RoutingSpec {
            classes: WasteClass::ALL.into_iter().zip(self.commands).collect(),
            bins: self
                .commands
                .iter()
                .zip(self.bins)
                .map(|(cmd, bin)| CommandBin { servo: cmd.servo, direction: cmd.direction, bin })
                .collect(),
        }
    }
}

impl Default for RoutingTable {
    fn default() -> Self {
        validate_routing_table(&RoutingSpec::default()).expect("default routing is valid")
    }
}

/// Convenience wrapper over [`RoutingTable::route_for`].
pub fn route_for(class: WasteClass, table: &RoutingTable) -> (ServoCommand, BinIndex) {
    table.route_for(class)
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("invalid bin geometry: depth {depth} m must be positive")]
pub struct InvalidGeometry {
    pub depth: f64,
}

/// A collection bin watched by an ultrasonic sensor mounted at its rim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinState {
    pub bin: BinIndex,
    pub item_count: u32,
    /// Interior depth in meters.
    pub depth_m: f64,
    /// Height added per deposited item, meters.
    pub fill_per_item_m: f64,
    pub threshold_percent: f64,
}

impl BinState {
    /// Simulated sensor reading: distance from the rim to the waste surface.
    pub fn measured_distance_m(&self) -> f64 {
        (self.depth_m - f64::from(self.item_count) * self.fill_per_item_m).max(0.0)
    }

    pub fn measured_distance_mm(&self) -> u16 {
        (self.measured_distance_m() * 1000.0).round().clamp(0.0, f64::from(u16::MAX)) as u16
    }
}

pub fn bin_level_percent(bin: &BinState) -> Result<f64, InvalidGeometry> {
    level_from_distance(bin.measured_distance_m(), bin.depth_m)
}

/// Fill level for a distance reading; `100 × (1 − distance/depth)` clamped to [0, 100].
pub fn level_from_distance(distance: f64, depth: f64) -> Result<f64, InvalidGeometry> {
    if !(depth > 0.0) {
        return Err(InvalidGeometry { depth });
    }
    // (depth − distance)/depth keeps integer-millimeter readings exact.
    Ok((100.0 * (depth - distance) / depth).clamp(0.0, 100.0))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Routing(#[from] RoutingViolations),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// Geometry and timing of the conveyor. Lengths in feet, times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineConfig {
    pub belt_length_ft: f64,
    pub belt_speed_ft_s: f64,
    /// Belt stop while the camera captures an item.
    pub capture_delay_s: f64,
    pub camera_station_ft: f64,
    pub servo_stations_ft: [f64; NUM_SERVOS],
    pub servo_actuation_s: f64,
    /// Default spacing used when generating uniform arrival schedules.
    pub arrival_spacing_s: f64,
    pub bin_depth_m: f64,
    pub bin_fill_per_item_m: f64,
    pub threshold_percent: f64,
    /// Treat detection latency as already containing the capture pause.
    pub latency_includes_pause: bool,
    /// Hard stop for a run; items still on the belt count as in flight.
    pub max_duration_s: f64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            belt_length_ft: 10.0,
            belt_speed_ft_s: 0.5,
            capture_delay_s: 10.0,
            camera_station_ft: 2.0,
            servo_stations_ft: [4.0, 6.0, 8.0],
            servo_actuation_s: 1.0,
            arrival_spacing_s: 30.0,
            bin_depth_m: 0.5,
            bin_fill_per_item_m: 0.05,
            threshold_percent: 80.0,
            latency_includes_pause: false,
            max_duration_s: 7.0 * 24.0 * 3600.0,
        }
    }
}

impl MachineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        let finite = [
            self.belt_length_ft,
            self.belt_speed_ft_s,
            self.capture_delay_s,
            self.camera_station_ft,
            self.servo_actuation_s,
            self.bin_depth_m,
            self.bin_fill_per_item_m,
            self.threshold_percent,
            self.max_duration_s,
        ];
        if finite.iter().chain(&self.servo_stations_ft).any(|v| !v.is_finite()) {
            return bad("machine values must be finite".into());
        }
        if self.belt_speed_ft_s <= 0.0 {
            return bad(format!("belt_speed_ft_s {} must be > 0", self.belt_speed_ft_s));
        }
        if self.capture_delay_s < 0.0 {
            return bad(format!("capture_delay_s {} must be >= 0", self.capture_delay_s));
        }
        if self.servo_actuation_s < 0.0 {
            return bad(format!("servo_actuation_s {} must be >= 0", self.servo_actuation_s));
        }
        let mut stations = vec![0.0, self.camera_station_ft];
        stations.extend(self.servo_stations_ft);
        stations.push(self.belt_length_ft);
        if stations.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "stations must satisfy 0 < camera < servo1 < servo2 < servo3 < belt_length, got {stations:?}"
            ));
        }
        if self.bin_depth_m <= 0.0 {
            return bad(format!("bin_depth_m {} must be > 0", self.bin_depth_m));
        }
        if self.bin_fill_per_item_m < 0.0 {
            return bad(format!("bin_fill_per_item_m {} must be >= 0", self.bin_fill_per_item_m));
        }
        if !(0.0..=100.0).contains(&self.threshold_percent) {
            return bad(format!("threshold_percent {} outside [0, 100]", self.threshold_percent));
        }
        if self.max_duration_s <= 0.0 {
            return bad("max_duration_s must be > 0".into());
        }
        Ok(())
    }

    pub fn bin_state(&self, bin: BinIndex, item_count: u32) -> BinState {
        BinState {
            bin,
            item_count,
            depth_m: self.bin_depth_m,
            fill_per_item_m: self.bin_fill_per_item_m,
            threshold_percent: self.threshold_percent,
        }
    }
}
