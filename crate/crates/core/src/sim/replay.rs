//! Reading trace files back and recomputing their metrics.

use crate::domain::RoutingTable;
use crate::sim::event::{SimEvent, TraceHeader};
use crate::sim::metrics::{MetricsAccumulator, SimMetrics};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("malformed trace at line {line}: {message}")]
pub struct MalformedTrace {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: Option<TraceHeader>,
    pub events: Vec<SimEvent>,
}

impl Trace {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(h) = &self.header {
            out.push_str(&h.to_string());
            out.push('\n');
        }
        for e in &self.events {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }

    pub fn routing(&self) -> RoutingTable {
        self.header.as_ref().map(|h| h.routing).unwrap_or_default()
    }
}

/// Parses a trace. The header is optional; an empty input is an empty trace.
/// A final line without a newline is treated as truncated.
pub fn parse_trace(text: &str) -> Result<Trace, MalformedTrace> {
    let mut header = None;
    let mut events = Vec::new();
    let line_count = text.lines().count();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let err = |message: String| MalformedTrace { line: n, message };
        if n == line_count && !text.ends_with('\n') {
            return Err(err("truncated line (missing newline)".into()));
        }
        if line.trim().is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if i == 0 {
                header = Some(line.parse::<TraceHeader>().map_err(|e| err(e.to_string()))?);
            }
            continue;
        }
        events.push(line.parse::<SimEvent>().map_err(|e| err(e.to_string()))?);
    }
    Ok(Trace { header, events })
}

/// Recomputes metrics, checking every event against its prefix.
pub fn replay_trace(trace: &Trace, line_of: impl Fn(usize) -> usize) -> Result<SimMetrics, MalformedTrace> {
    let mut acc = MetricsAccumulator::new(trace.routing());
    for (i, e) in trace.events.iter().enumerate() {
        acc.feed(e).map_err(|err| MalformedTrace { line: line_of(i), message: err.message })?;
    }
    Ok(acc.metrics())
}

/// Parses and replays trace text.
pub fn replay(text: &str) -> Result<SimMetrics, MalformedTrace> {
    let trace = parse_trace(text)?;
    let event_lines: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, _)| i + 1)
        .collect();
    replay_trace(&trace, |i| event_lines[i])
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
0.000000 0 ItemArrived item=0 class=plastic
4.000000 1 PresenceDetected item=0
17.000000 2 Classified item=0 class=plastic predicted=plastic peak=1 latency=3.000000
21.000000 3 ItemBinned item=0 class=plastic bin=1 count=1
";

    #[test]
    fn replays_small_trace() {
        let m = replay(SMALL).unwrap();
        assert_eq!(m.correctly_binned, 1);
        assert_eq!(m.mean_cycle_time_s, 21.0);
    }

    #[test]
    fn empty_trace_is_zero() {
        let m = replay("").unwrap();
        assert_eq!((m.presented, m.binned), (0, 0));
    }

    #[test]
    fn truncation_reports_line() {
        let cut = &SMALL[..SMALL.len() - 20];
        let err = replay(cut).unwrap_err();
        assert_eq!(err.line, 4);
    }

    #[test]
    fn wrong_bin_reports_line() {
        let bad = SMALL.replace("bin=1", "bin=2");
        let err = replay(&bad).unwrap_err();
        assert_eq!(err.line, 4);
        assert!(err.message.contains("bin 2"));
    }

    #[test]
    fn round_trips_text() {
        let t = parse_trace(SMALL).unwrap();
        assert_eq!(t.to_text(), SMALL);
    }
}
