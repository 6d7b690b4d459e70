//! Subcommand bodies. Each returns a [`CliError`] that maps to an exit code.

use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use convowaste_core::config::BuildError;
use convowaste_core::link::{annotate, parse_hex, ChecksumKind, Codec};
use convowaste_core::sim::{format_table, parse_trace, replay as replay_text, Scenario, SimError, SimMetrics, SimOptions, Simulation};
use convowaste_core::Config;

use crate::server::{Gateway, ReplaySession, ServeOptions, Session};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad or missing input: exit code 2.
    #[error("{0}")]
    Input(String),
    /// The simulation itself failed: exit code 1.
    #[error("{0}")]
    Sim(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Sim(_) => 1,
            CliError::Input(_) => 2,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(e) => CliError::Input(format!("invalid configuration: {e}")),
            other => CliError::Sim(other.to_string()),
        }
    }
}

impl From<BuildError> for CliError {
    fn from(e: BuildError) -> Self {
        match e {
            BuildError::Adapter(_) => CliError::Sim(e.to_string()),
            other => CliError::Input(format!("invalid configuration: {other}")),
        }
    }
}

fn read(path: &Path, what: &str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {what} {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Sim(format!("cannot write {}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Text,
    Json,
}

/// Config file (or defaults) with `key=value` overrides applied.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config, CliError> {
    let mut config = match path {
        Some(p) => Config::from_json(&read(p, "config")?)
            .map_err(|e| CliError::Input(format!("invalid config {}: {e}", p.display())))?,
        None => Config::default(),
    };
    for o in overrides {
        config.apply_override(o).map_err(|e| CliError::Input(format!("--set {o}: {e}")))?;
    }
    config.validate().map_err(|e| CliError::Input(format!("invalid configuration: {e}")))?;
    Ok(config)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    let text = read(path, "scenario")?;
    Scenario::from_json(&text).map_err(|e| CliError::Input(format!("invalid scenario {}: {e}", path.display())))
}

fn print_metrics(out: &mut dyn Write, metrics: &SimMetrics, format: Format) -> Result<(), CliError> {
    let text = match format {
        Format::Text => format_table(metrics),
        Format::Json => serde_json::to_string_pretty(metrics).expect("metrics serialize") + "\n",
    };
    out.write_all(text.as_bytes()).map_err(|e| CliError::Sim(e.to_string()))
}

pub struct SimulateArgs {
    pub scenario: PathBuf,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: u64,
    pub out: PathBuf,
    pub format: Format,
}

pub fn simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<SimMetrics, CliError> {
    let scenario = load_scenario(&args.scenario)?;
    let config = load_config(args.config.as_deref(), &args.overrides)?;
    let classifier = config.build_classifier(args.seed)?;
    let options = SimOptions { seed: args.seed, record_events: true, record_link: true, keep_alive: false };
    let mut sim = Simulation::new(&config, &scenario, classifier, options)?;
    let metrics = sim.run()?;

    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Sim(format!("cannot create {}: {e}", args.out.display())))?;
    write_file(&args.out.join("trace.log"), &sim.trace_text())?;
    write_file(&args.out.join("metrics.json"), &(serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n"))?;
    let lines = |items: Vec<String>| items.into_iter().map(|l| l + "\n").collect::<String>();
    write_file(&args.out.join("notifications.log"), &lines(sim.notifications().iter().map(|n| n.to_string()).collect()))?;
    write_file(&args.out.join("link.log"), &lines(sim.link_log().iter().map(|r| r.to_string()).collect()))?;

    print_metrics(out, &metrics, args.format)?;
    Ok(metrics)
}

fn load_trace(path: &Path) -> Result<(String, SimMetrics), CliError> {
    let text = read(path, "trace")?;
    let metrics = replay_text(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok((text, metrics))
}

pub fn report(trace: &Path, format: Format, out: &mut dyn Write) -> Result<SimMetrics, CliError> {
    let (_, metrics) = load_trace(trace)?;
    print_metrics(out, &metrics, format)?;
    Ok(metrics)
}

/// Prints the trace's events, spaced by their simulated time divided by
/// `speed` (0 prints at once), followed by the metrics table.
pub fn replay(trace: &Path, speed: f64, out: &mut dyn Write) -> Result<SimMetrics, CliError> {
    if !(speed >= 0.0) || !speed.is_finite() {
        return Err(CliError::Input(format!("--speed must be a non-negative number, got {speed}")));
    }
    let (text, metrics) = load_trace(trace)?;
    let parsed = parse_trace(&text).expect("validated by load_trace");
    let io = |e: std::io::Error| CliError::Sim(e.to_string());
    let mut last = None;
    for e in &parsed.events {
        if let (Some(prev), true) = (last, speed > 0.0) {
            let gap = (e.time - prev).as_secs_f64() / speed;
            if gap > 0.0 {
                out.flush().map_err(io)?;
                thread::sleep(Duration::from_secs_f64(gap));
            }
        }
        last = Some(e.time);
        writeln!(out, "{e}").map_err(io)?;
    }
    print_metrics(out, &metrics, Format::Text)?;
    Ok(metrics)
}

pub enum FrameSource {
    Hex(String),
    File(PathBuf),
}

pub fn frame_dump(source: &FrameSource, checksum: ChecksumKind, out: &mut dyn Write) -> Result<(), CliError> {
    let bytes = match source {
        FrameSource::Hex(h) => parse_hex(h).map_err(|e| CliError::Input(format!("--hex: {e}")))?,
        FrameSource::File(p) => {
            fs::read(p).map_err(|e| CliError::Input(format!("cannot read frame file {}: {e}", p.display())))?
        }
    };
    for line in annotate(Codec::new(checksum), &bytes) {
        writeln!(out, "{line}").map_err(|e| CliError::Sim(e.to_string()))?;
    }
    Ok(())
}

pub fn gen_scenario(scenario: &Scenario, dest: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    scenario.validate().map_err(|e| CliError::Input(e.to_string()))?;
    let text = scenario.to_json();
    match dest {
        Some(p) => fs::write(p, &text).map_err(|e| CliError::Input(format!("cannot write {}: {e}", p.display()))),
        None => out.write_all(text.as_bytes()).map_err(|e| CliError::Sim(e.to_string())),
    }
}

pub enum ServeSource {
    Scenario(PathBuf),
    Trace(PathBuf),
}

pub struct ServeArgs {
    pub source: ServeSource,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: u64,
    pub listen: String,
    pub speed: f64,
    pub exit_when_finished: bool,
}

/// Builds the session and binds the listener.
pub fn start_gateway(args: &ServeArgs) -> Result<Gateway, CliError> {
    if !(args.speed > 0.0) || !args.speed.is_finite() {
        return Err(CliError::Input(format!("--speed must be positive, got {}", args.speed)));
    }
    let config = load_config(args.config.as_deref(), &args.overrides)?;
    let session = match &args.source {
        ServeSource::Scenario(p) => {
            let scenario = load_scenario(p)?;
            let classifier = config.build_classifier(args.seed)?;
            // a live machine keeps running after its scenario so operators can act
            let options = SimOptions {
                seed: args.seed,
                record_events: true,
                record_link: false,
                keep_alive: !args.exit_when_finished,
            };
            Session::Live(Box::new(Simulation::new(&config, &scenario, classifier, options)?))
        }
        ServeSource::Trace(p) => {
            let (text, _) = load_trace(p)?;
            Session::Replay(ReplaySession::new(parse_trace(&text).expect("validated by load_trace"), &config))
        }
    };
    let listener = TcpListener::bind(&args.listen)
        .map_err(|e| CliError::Input(format!("cannot listen on {}: {e}", args.listen)))?;
    let options = ServeOptions {
        speed: args.speed,
        machine_id: config.telemetry.machine_id.clone(),
        snapshot_period: convowaste_core::SimTime::from_secs_f64(config.link.telemetry_period_s),
        exit_when_finished: args.exit_when_finished,
    };
    Gateway::start(listener, session, options).map_err(|e| CliError::Sim(e.to_string()))
}
