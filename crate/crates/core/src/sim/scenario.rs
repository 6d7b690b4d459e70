//! Arrival schedules and scheduled operator commands.
//!
//! ```json
//! {"v":1,
//!  "items":[{"t":0,"class":"plastic"},{"t":30,"class":"glass","image_ref":"img/0001.jpg"}],
//!  "commands":[{"t":120,"cmd":"dump","bin":3}]}
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::unit_f64;
use crate::domain::{WasteClass, NUM_CLASSES};
use crate::sim::event::SimCommand;

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioItem {
    /// Arrival time at the belt entry, seconds.
    pub t: f64,
    pub class: WasteClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledCommand {
    pub t: f64,
    #[serde(flatten)]
    pub command: SimCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub v: u32,
    #[serde(default)]
    pub items: Vec<ScenarioItem>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub commands: Vec<ScheduledCommand>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario { v: SCENARIO_VERSION, items: Vec::new(), commands: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid scenario: {0}")]
pub struct ScenarioError(pub String);

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        let mut out = String::from("{\"v\":");
        out.push_str(&self.v.to_string());
        out.push_str(",\"items\":[\n");
        let items: Vec<String> = self.items.iter().map(|i| serde_json::to_string(i).expect("item serializes")).collect();
        out.push_str(&items.join(",\n"));
        out.push_str("\n]");
        if !self.commands.is_empty() {
            out.push_str(",\"commands\":[\n");
            let cmds: Vec<String> =
                self.commands.iter().map(|c| serde_json::to_string(c).expect("command serializes")).collect();
            out.push_str(&cmds.join(",\n"));
            out.push_str("\n]");
        }
        out.push_str("}\n");
        out
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.v != SCENARIO_VERSION {
            return Err(ScenarioError(format!("unsupported scenario version {}", self.v)));
        }
        let times = self.items.iter().map(|i| i.t).chain(self.commands.iter().map(|c| c.t));
        for t in times {
            if !(t.is_finite() && t >= 0.0) {
                return Err(ScenarioError(format!("time {t} must be finite and >= 0")));
            }
        }
        for item in &self.items {
            if let Some(r) = &item.image_ref {
                if r.is_empty() || r.contains(char::is_whitespace) {
                    return Err(ScenarioError(format!("image_ref `{r}` must be non-empty without whitespace")));
                }
            }
        }
        Ok(())
    }

    pub fn single(class: WasteClass) -> Scenario {
        Scenario { items: vec![ScenarioItem { t: 0.0, class, image_ref: None }], ..Scenario::default() }
    }

    /// `per_class` items of every class in round-robin class order, `spacing` seconds apart.
    pub fn uniform(per_class: usize, spacing: f64) -> Scenario {
        let items = (0..per_class * NUM_CLASSES)
            .map(|i| ScenarioItem { t: i as f64 * spacing, class: WasteClass::ALL[i % NUM_CLASSES], image_ref: None })
            .collect();
        Scenario { items, ..Scenario::default() }
    }

    /// Every listed class arriving at the same instant.
    pub fn burst(classes: &[WasteClass], t: f64) -> Scenario {
        let items = classes.iter().map(|&class| ScenarioItem { t, class, image_ref: None }).collect();
        Scenario { items, ..Scenario::default() }
    }

    /// `count` items with exponential inter-arrival times of mean `mean_spacing`
    /// and uniformly drawn classes.
    pub fn poisson(count: usize, mean_spacing: f64, seed: u64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SCENARIO_STREAM);
        let mut t = 0.0;
        let items = (0..count)
            .map(|_| {
                let class = WasteClass::ALL[((unit_f64(&mut rng) * NUM_CLASSES as f64) as usize).min(NUM_CLASSES - 1)];
                let item = ScenarioItem { t: (t * 1e6_f64).round() / 1e6, class, image_ref: None };
                t += -mean_spacing * (1.0 - unit_f64(&mut rng)).ln();
                item
            })
            .collect();
        Scenario { items, ..Scenario::default() }
    }
}

const SCENARIO_STREAM: u64 = 2;
