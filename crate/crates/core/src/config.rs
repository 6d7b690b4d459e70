//! Run configuration shared by the CLI and the gateway.
//!
//! Every key in the file can also be set from the command line as a dotted
//! path, e.g. `machine.belt_speed_ft_s=0.75` or `telemetry.max_attempts=5`.

use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classifier::{
    Classifier, ClassifierError, ExternalClassifier, PerfectClassifier, ScriptedClassifier, StochasticModel, DEFAULT_PEAK,
};
use crate::domain::{
    validate_routing_table, ClassProfile, ConfigError, MachineConfig, ProfileSet, RoutingSpec, RoutingTable, WasteClass,
    NUM_CLASSES,
};
use crate::link::ChecksumKind;
use crate::telemetry::{RetryPolicy, SmsClock};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Stochastic,
    Perfect,
    Scripted,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    /// Per-class accuracy and latency; defaults to the measured reference values.
    pub profiles: Option<Vec<ClassProfile>>,
    /// `matrix[true][predicted]`; overrides accuracies when present.
    pub confusion_matrix: Option<[[f64; NUM_CLASSES]; NUM_CLASSES]>,
    pub confidence_peak: f64,
    /// Predictions whose peak probability is below this go to the reject tray.
    pub confidence_gate: Option<f64>,
    /// Predicted classes for the scripted classifier, in arrival order.
    pub script: Vec<WasteClass>,
    /// Adapter program and arguments for the external classifier.
    pub external_command: Vec<String>,
    /// Alternatively, a TCP address speaking the same line protocol.
    pub external_addr: Option<String>,
    pub external_timeout_s: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            kind: ClassifierKind::Stochastic,
            profiles: None,
            confusion_matrix: None,
            confidence_peak: DEFAULT_PEAK,
            confidence_gate: None,
            script: Vec::new(),
            external_command: Vec::new(),
            external_addr: None,
            external_timeout_s: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub checksum: ChecksumKind,
    pub telemetry_period_s: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig { checksum: ChecksumKind::Xor, telemetry_period_s: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelemetryConfig {
    pub machine_id: String,
    /// Wall-clock instant of simulated time zero (RFC 3339).
    pub epoch: DateTime<Utc>,
    pub gsm_success_probability: f64,
    pub max_attempts: u32,
    pub retry_backoff_s: f64,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        TelemetryConfig {
            machine_id: "M1".into(),
            epoch: DateTime::UNIX_EPOCH,
            gsm_success_probability: 1.0,
            max_attempts: 3,
            retry_backoff_s: 5.0,
        }
    }
}

impl TelemetryConfig {
    pub fn clock(&self) -> SmsClock {
        SmsClock { epoch: self.epoch }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy { max_attempts: self.max_attempts, backoff: SimTime::from_secs_f64(self.retry_backoff_s) }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub machine: MachineConfig,
    pub classifier: ClassifierConfig,
    pub link: LinkConfig,
    pub telemetry: TelemetryConfig,
    pub routing: RoutingSpec,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Config, ConfigError> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.machine.validate()?;
        self.routing_table()?;
        self.profiles()?;
        let c = &self.classifier;
        if let Some(gate) = c.confidence_gate {
            if !(0.0..=1.0).contains(&gate) {
                return Err(ConfigError::Invalid(format!("classifier.confidence_gate {gate} outside [0, 1]")));
            }
        }
        if !(c.external_timeout_s > 0.0 && c.external_timeout_s.is_finite()) {
            return Err(ConfigError::Invalid("classifier.external_timeout_s must be > 0".into()));
        }
        if c.kind == ClassifierKind::External && c.external_command.is_empty() && c.external_addr.is_none() {
            return Err(ConfigError::Invalid(
                "external classifier needs classifier.external_command or classifier.external_addr".into(),
            ));
        }
        if !(self.link.telemetry_period_s > 0.0 && self.link.telemetry_period_s.is_finite()) {
            return Err(ConfigError::Invalid("link.telemetry_period_s must be > 0".into()));
        }
        let t = &self.telemetry;
        if !(0.0..=1.0).contains(&t.gsm_success_probability) {
            return Err(ConfigError::Invalid(format!(
                "telemetry.gsm_success_probability {} outside [0, 1]",
                t.gsm_success_probability
            )));
        }
        if t.max_attempts == 0 {
            return Err(ConfigError::Invalid("telemetry.max_attempts must be >= 1".into()));
        }
        if !(t.retry_backoff_s >= 0.0 && t.retry_backoff_s.is_finite()) {
            return Err(ConfigError::Invalid("telemetry.retry_backoff_s must be >= 0".into()));
        }
        if t.machine_id.is_empty() || t.machine_id.contains(char::is_whitespace) || !t.machine_id.is_ascii() {
            return Err(ConfigError::Invalid("telemetry.machine_id must be non-empty ASCII without spaces".into()));
        }
        Ok(())
    }

    pub fn routing_table(&self) -> Result<RoutingTable, ConfigError> {
        Ok(validate_routing_table(&self.routing)?)
    }

    pub fn profiles(&self) -> Result<ProfileSet, ConfigError> {
        match &self.classifier.profiles {
            Some(p) => Ok(ProfileSet::new(p)?),
            None => Ok(ProfileSet::default()),
        }
    }

    /// Sets one dotted key from `key=value` text. The value is read as JSON
    /// when possible and as a plain string otherwise.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("override `{assignment}` is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = match slot {
                Value::Object(map) => map
                    .get_mut(part)
                    .ok_or_else(|| ConfigError::Invalid(format!("unknown config key `{key}`")))?,
                Value::Array(items) => part
                    .parse::<usize>()
                    .ok()
                    .and_then(|i| items.get_mut(i))
                    .ok_or_else(|| ConfigError::Invalid(format!("unknown config key `{key}`")))?,
                _ => return Err(ConfigError::Invalid(format!("unknown config key `{key}`"))),
            };
        }
        *slot = value;
        let updated: Config =
            serde_json::from_value(doc).map_err(|e| ConfigError::Invalid(format!("override `{key}`: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Builds the configured classifier. `seed` feeds the stochastic model.
    pub fn build_classifier(&self, seed: u64) -> Result<Box<dyn Classifier + Send>, BuildError> {
        let c = &self.classifier;
        let profiles = self.profiles()?;
        Ok(match c.kind {
            ClassifierKind::Perfect => Box::new(PerfectClassifier::new(profiles)),
            ClassifierKind::Stochastic => {
                let model = match c.confusion_matrix {
                    Some(m) => StochasticModel::with_confusion_matrix(profiles, m, seed)?,
                    None => StochasticModel::new(profiles, seed),
                };
                Box::new(model.with_peak(c.confidence_peak)?)
            }
            ClassifierKind::Scripted => {
                Box::new(ScriptedClassifier::new(c.script.iter().copied(), profiles).with_peak(c.confidence_peak)?)
            }
            ClassifierKind::External => {
                let timeout = Duration::from_secs_f64(c.external_timeout_s);
                let adapter = match &c.external_addr {
                    Some(addr) => ExternalClassifier::connect(addr.as_str(), timeout, profiles),
                    None => ExternalClassifier::spawn(&c.external_command, timeout, profiles),
                };
                Box::new(adapter.map_err(|e| BuildError::Adapter(e.to_string()))?)
            }
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error("cannot start classifier adapter: {0}")]
    Adapter(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!(Config::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(Config::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_json(r#"{"machine":{"belt_sped_ft_s":1}}"#).is_err());
        let mut cfg = Config::default();
        assert!(cfg.apply_override("machine.belt_sped_ft_s=1").is_err());
        assert!(cfg.apply_override("nothing=1").is_err());
    }

    #[test]
    fn overrides_reach_every_section() {
        let mut cfg = Config::default();
        cfg.apply_override("machine.belt_speed_ft_s=0.75").unwrap();
        cfg.apply_override("machine.servo_stations_ft.2=9").unwrap();
        cfg.apply_override("telemetry.max_attempts=5").unwrap();
        cfg.apply_override("telemetry.machine_id=yard-7").unwrap();
        cfg.apply_override("classifier.kind=perfect").unwrap();
        cfg.apply_override("classifier.confidence_gate=0.5").unwrap();
        cfg.apply_override("link.checksum=crc8").unwrap();
        cfg.apply_override("telemetry.epoch=2024-01-01T00:00:00Z").unwrap();
        assert_eq!(cfg.machine.belt_speed_ft_s, 0.75);
        assert_eq!(cfg.machine.servo_stations_ft, [4.0, 6.0, 9.0]);
        assert_eq!(cfg.telemetry.max_attempts, 5);
        assert_eq!(cfg.telemetry.machine_id, "yard-7");
        assert_eq!(cfg.classifier.kind, ClassifierKind::Perfect);
        assert_eq!(cfg.classifier.confidence_gate, Some(0.5));
        assert_eq!(cfg.link.checksum, ChecksumKind::Crc8);
    }

    #[test]
    fn invalid_override_leaves_config_untouched() {
        let mut cfg = Config::default();
        assert!(cfg.apply_override("machine.belt_speed_ft_s=-1").is_err());
        assert!(cfg.apply_override("telemetry.gsm_success_probability=2").is_err());
        assert_eq!(cfg, Config::default());
    }

    #[test]
    fn routing_anchor_enforced_in_config() {
        let mut cfg = Config::default();
        let err = cfg.apply_override(r#"routing.classes.plastic={"servo":2,"direction":"cw"}"#).unwrap_err();
        assert!(err.to_string().contains("anchor mismatch"), "{err}");
    }

    #[test]
    fn external_requires_endpoint() {
        let mut cfg = Config::default();
        assert!(cfg.apply_override("classifier.kind=external").is_err());
    }
}
