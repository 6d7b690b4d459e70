//! Bin fill monitoring, SMS-style notifications over a lossy GSM channel
//! model, and the front-panel display readout.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, TimeDelta, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::unit_f64;
use crate::domain::{bin_level_percent, BinIndex, BinState, WasteClass, NUM_BINS};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeliveryState {
    Queued,
    Sent,
    Failed,
    Retrying,
}

impl DeliveryState {
    pub fn slug(self) -> &'static str {
        match self {
            DeliveryState::Queued => "queued",
            DeliveryState::Sent => "sent",
            DeliveryState::Failed => "failed",
            DeliveryState::Retrying => "retrying",
        }
    }
}

impl FromStr for DeliveryState {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "queued" => Ok(DeliveryState::Queued),
            "sent" => Ok(DeliveryState::Sent),
            "failed" => Ok(DeliveryState::Failed),
            "retrying" => Ok(DeliveryState::Retrying),
            _ => Err(format!("unknown delivery state `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub id: u64,
    pub bin: BinIndex,
    pub level_percent: f64,
    pub time: SimTime,
    pub state: DeliveryState,
    pub attempts: u32,
}

/// Edge-triggered threshold detector with re-arm below the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdMonitor {
    threshold: f64,
    armed: [bool; NUM_BINS],
    next_id: u64,
}

impl ThresholdMonitor {
    pub fn new(threshold_percent: f64) -> Self {
        ThresholdMonitor { threshold: threshold_percent, armed: [true; NUM_BINS], next_id: 1 }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Feeds one level reading; returns a queued notification on a rising edge.
    pub fn observe(&mut self, bin: BinIndex, level: f64, time: SimTime) -> Option<Notification> {
        let slot = bin.slot();
        if level < self.threshold {
            self.armed[slot] = true;
            return None;
        }
        if !self.armed[slot] {
            return None;
        }
        self.armed[slot] = false;
        let id = self.next_id;
        self.next_id += 1;
        Some(Notification { id, bin, level_percent: level, time, state: DeliveryState::Queued, attempts: 0 })
    }
}

/// Checks all bins at once against the monitor's hysteresis state.
pub fn check_thresholds(monitor: &mut ThresholdMonitor, bins: &[BinState; NUM_BINS], time: SimTime) -> Vec<Notification> {
    bins.iter()
        .filter_map(|b| {
            let level = bin_level_percent(b).ok()?;
            monitor.observe(b.bin, level, time)
        })
        .collect()
}

/// Maps simulated time onto wall-clock timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmsClock {
    pub epoch: DateTime<Utc>,
}

impl Default for SmsClock {
    fn default() -> Self {
        SmsClock { epoch: DateTime::UNIX_EPOCH }
    }
}

impl SmsClock {
    pub fn at(&self, t: SimTime) -> DateTime<Utc> {
        self.epoch + TimeDelta::microseconds(t.as_micros() as i64)
    }

    pub fn sim_time(&self, wall: DateTime<Utc>) -> Option<SimTime> {
        let us = (wall - self.epoch).num_microseconds()?;
        u64::try_from(us).ok().map(SimTime::from_micros)
    }
}

pub const SMS_MAX_LEN: usize = 160;

/// `CONVOWASTE <machine_id> BIN <b> FULL <level>% AT <ISO-8601>`.
pub fn format_sms(n: &Notification, machine_id: &str, clock: &SmsClock) -> String {
    let stamp = clock.at(n.time).to_rfc3339_opts(SecondsFormat::AutoSi, true);
    format!("CONVOWASTE {machine_id} BIN {} FULL {}% AT {stamp}", n.bin, n.level_percent)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSms {
    pub machine_id: String,
    pub bin: BinIndex,
    pub level_percent: f64,
    pub time: SimTime,
}

pub fn parse_sms(text: &str, clock: &SmsClock) -> Result<ParsedSms, String> {
    let bad = || format!("not a notification message: `{text}`");
    let f: Vec<&str> = text.split(' ').collect();
    let ["CONVOWASTE", machine_id, "BIN", bin, "FULL", level, "AT", stamp] = f[..] else { return Err(bad()) };
    let bin = bin.parse().ok().and_then(BinIndex::new).ok_or_else(bad)?;
    let level_percent = level.strip_suffix('%').and_then(|l| l.parse().ok()).ok_or_else(bad)?;
    let wall = DateTime::parse_from_rfc3339(stamp).map_err(|_| bad())?.with_timezone(&Utc);
    let time = clock.sim_time(wall).ok_or_else(bad)?;
    Ok(ParsedSms { machine_id: machine_id.to_string(), bin, level_percent, time })
}

/// Debug rendering of a notification as GSM modem commands.
pub fn at_commands(sms: &str, recipient: &str) -> Vec<String> {
    vec![
        "AT".to_string(),
        "AT+CMGF=1".to_string(),
        format!("AT+CMGS=\"{recipient}\""),
        format!("{sms}\u{1a}"),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff: SimTime,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, backoff: SimTime::from_secs(5) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("GSM channel closed")]
pub struct ChannelClosed;

/// Lossy message channel: each attempt independently succeeds with
/// probability `success_probability`.
#[derive(Debug, Clone)]
pub struct GsmChannel {
    success_probability: f64,
    rng: ChaCha8Rng,
    closed: bool,
}

/// Stream index used for the GSM channel so it never shares draws with the
/// classifier, which uses stream 0 of the same seed.
pub const GSM_STREAM: u64 = 1;

impl GsmChannel {
    pub fn new(success_probability: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(GSM_STREAM);
        GsmChannel { success_probability, rng, closed: false }
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// One transmission attempt.
    pub fn attempt(&mut self) -> Result<bool, ChannelClosed> {
        if self.closed {
            return Err(ChannelClosed);
        }
        Ok(unit_f64(&mut self.rng) < self.success_probability)
    }
}

/// One logged transmission attempt; `offset` is relative to the first attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attempt {
    pub number: u32,
    pub offset: SimTime,
    pub state: DeliveryState,
}

/// Runs the retry loop for `n`, updating its state and attempt count.
pub fn gsm_send(n: &mut Notification, channel: &mut GsmChannel, policy: &RetryPolicy) -> Result<Vec<Attempt>, ChannelClosed> {
    let mut log = Vec::new();
    let max = policy.max_attempts.max(1);
    for number in 1..=max {
        let ok = channel.attempt()?;
        let state = match (ok, number == max) {
            (true, _) => DeliveryState::Sent,
            (false, true) => DeliveryState::Failed,
            (false, false) => DeliveryState::Retrying,
        };
        n.attempts = number;
        n.state = state;
        log.push(Attempt { number, offset: SimTime::from_micros(policy.backoff.as_micros() * u64::from(number - 1)), state });
        if state != DeliveryState::Retrying {
            break;
        }
    }
    Ok(log)
}

/// Front-panel readout: last detected class and per-bin counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisplayState {
    pub last_detected_class: Option<WasteClass>,
    pub counters: [u32; NUM_BINS],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisplayInput {
    Classified(WasteClass),
    Binned(BinIndex),
    Dumped(BinIndex),
}

pub fn display_update(mut state: DisplayState, input: DisplayInput) -> DisplayState {
    match input {
        DisplayInput::Classified(c) => state.last_detected_class = Some(c),
        DisplayInput::Binned(b) => state.counters[b.slot()] += 1,
        DisplayInput::Dumped(b) => state.counters[b.slot()] = 0,
    }
    state
}

impl fmt::Display for DisplayState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let last = self.last_detected_class.map_or("-", |c| c.label());
        write!(f, "{last} |")?;
        for (i, c) in self.counters.iter().enumerate() {
            write!(f, " B{}:{c}", i + 1)?;
        }
        Ok(())
    }
}
