use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use convowaste_core::link::ChecksumKind;
use convowaste_core::sim::Scenario;
use convowaste_gateway::commands::{
    self, CliError, Format, FrameSource, ServeArgs, ServeSource, SimulateArgs,
};

/// Simulator, trace tools and operator gateway for the ConvoWaste sorting machine.
#[derive(Parser)]
#[command(name = "convowaste", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set machine.capture_delay_s=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for the classifier and the GSM channel.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write trace.log, metrics.json, notifications.log and link.log.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (created if missing).
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Recompute the metrics table from a trace file.
    Report {
        trace: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Print a trace's events at a multiple of simulated time, then its metrics.
    Replay {
        trace: PathBuf,
        /// Simulated seconds per wall second; 0 prints everything at once.
        #[arg(long, default_value_t = 0.0)]
        speed: f64,
    },
    /// Serve operators over JSON lines (TCP) or WebSocket on the same port.
    Serve {
        /// Run this scenario live.
        #[arg(long, conflicts_with = "trace", required_unless_present = "trace")]
        scenario: Option<PathBuf>,
        /// Replay a finished trace instead of simulating.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Simulated seconds per wall second (1, 10 and 100 are typical).
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Stop once the scenario or trace has run out instead of idling.
        #[arg(long)]
        exit_when_finished: bool,
    },
    /// Decode serial frames and annotate each one.
    FrameDump {
        /// Hex bytes, spaces optional, e.g. "AA 01 01 01 01".
        #[arg(long, conflicts_with = "file", required_unless_present = "file")]
        hex: Option<String>,
        /// Raw binary capture.
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Checksum::Xor)]
        checksum: Checksum,
    },
    /// Write an arrival schedule.
    GenScenario {
        #[command(subcommand)]
        kind: GenKind,
        /// Output file; stdout when omitted.
        #[arg(long, global = true)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum GenKind {
    /// Classes in round-robin order at a fixed spacing.
    Uniform {
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        /// Seconds between arrivals.
        #[arg(long, default_value_t = 30.0)]
        spacing: f64,
    },
    /// Random classes with exponential gaps.
    Poisson {
        #[arg(long, default_value_t = 300)]
        count: usize,
        /// Mean seconds between arrivals.
        #[arg(long, default_value_t = 30.0)]
        mean_spacing: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Checksum {
    Xor,
    Crc8,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Cmd::Simulate { scenario, config, out: dir, format } => {
            let args = SimulateArgs {
                scenario,
                config: config.config,
                overrides: config.overrides,
                seed: config.seed,
                out: dir,
                format,
            };
            commands::simulate(&args, &mut out)?;
        }
        Cmd::Report { trace, format } => {
            commands::report(&trace, format, &mut out)?;
        }
        Cmd::Replay { trace, speed } => {
            commands::replay(&trace, speed, &mut out)?;
        }
        Cmd::Serve { scenario, trace, config, listen, speed, exit_when_finished } => {
            let source = match (scenario, trace) {
                (Some(s), _) => ServeSource::Scenario(s),
                (None, Some(t)) => ServeSource::Trace(t),
                (None, None) => unreachable!("clap requires one source"),
            };
            let args = ServeArgs {
                source,
                config: config.config,
                overrides: config.overrides,
                seed: config.seed,
                listen,
                speed,
                exit_when_finished,
            };
            let gateway = commands::start_gateway(&args)?;
            writeln!(out, "listening on {}", gateway.addr()).map_err(|e| CliError::Sim(e.to_string()))?;
            out.flush().map_err(|e| CliError::Sim(e.to_string()))?;
            drop(out);
            gateway.wait()?;
        }
        Cmd::FrameDump { hex, file, checksum } => {
            let source = match (hex, file) {
                (Some(h), _) => FrameSource::Hex(h),
                (None, Some(f)) => FrameSource::File(f),
                (None, None) => unreachable!("clap requires one source"),
            };
            let kind = match checksum {
                Checksum::Xor => ChecksumKind::Xor,
                Checksum::Crc8 => ChecksumKind::Crc8,
            };
            commands::frame_dump(&source, kind, &mut out)?;
        }
        Cmd::GenScenario { kind, out: dest } => {
            let scenario = match kind {
                GenKind::Uniform { per_class, spacing } => Scenario::uniform(per_class, spacing),
                GenKind::Poisson { count, mean_spacing, seed } => Scenario::poisson(count, mean_spacing, seed),
            };
            commands::gen_scenario(&scenario, dest.as_deref(), &mut out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("convowaste: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
