mod config;
mod opbench;
mod train;
mod transform;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bench500::{MODEL_SCHEMA_VERSION, WIRE_FORMAT_VERSION};

/// Deep-learning benchmarking suites: operator timing and validation,
/// training, simulated distributed training and graph transformations.
#[derive(Debug, Parser)]
#[command(name = "bench500", disable_version_flag = true)]
struct Cli {
    /// Print the program and file format versions.
    #[arg(long)]
    version: bool,

    /// JSON file with defaults for the subcommand's flags (same keys).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate and time operators over a list of benchmark shapes.
    Opbench(opbench::OpbenchArgs),
    /// Train a model and write its metric stream as JSON lines.
    Train(train::TrainArgs),
    /// Train with several workers under a distributed scheme.
    Disttrain(train::DistArgs),
    /// Split convolutions into micro-batches under a workspace cap.
    Transform(transform::TransformArgs),
}

/// Bad flags, config keys or option values. Exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn version_text() -> String {
    format!(
        "bench500 {}\nmodel schema version {MODEL_SCHEMA_VERSION}\nwire format version {WIRE_FORMAT_VERSION}",
        env!("CARGO_PKG_VERSION")
    )
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = config::load(cli.config.as_deref())?;
    match cli.command {
        Some(Command::Opbench(a)) => opbench::run(config::resolve(a, file.as_ref())?),
        Some(Command::Train(a)) => train::run_train(config::resolve(a, file.as_ref())?),
        Some(Command::Disttrain(a)) => train::run_dist(config::resolve(a, file.as_ref())?),
        Some(Command::Transform(a)) => transform::run(config::resolve(a, file.as_ref())?),
        None => Err(usage("no subcommand given (see --help)")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.version {
        println!("{}", version_text());
        return ExitCode::SUCCESS;
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
