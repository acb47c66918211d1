use std::path::PathBuf;
use std::process::ExitCode;

use camb::harness::{self, ExperimentConfig, RunOptions};
use camb::model::Objective;
use camb::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "camb", version, about = "Train, explain and score CAM saliency maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: u64,
    /// Restrict to one loss from the config.
    #[arg(long)]
    loss: Option<Objective>,
    /// Worker threads for per-sample work.
    #[arg(long)]
    threads: Option<usize>,
    /// Single-threaded, bitwise reproducible.
    #[arg(long)]
    deterministic: bool,
}

impl RunArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            threads: self.threads,
            deterministic: self.deterministic,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset and its manifest.
    GenData(Common),
    /// Train one bundle per configured loss.
    Train(RunArgs),
    /// Fit linear probes for contrastive runs.
    Probe(RunArgs),
    /// Write saliency maps for the test samples.
    Explain(RunArgs),
    /// Score the saliency maps.
    Evaluate(RunArgs),
    /// Aggregate all seeds into the report tables.
    Report(Common),
    /// Print the default config.
    DefaultConfig,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Spec(_) => 2,
        Error::MissingArtifact { .. } | Error::StaleArtifact { .. } | Error::MissingRuns(_) | Error::MissingProbe => 3,
        Error::Numeric(_) | Error::Diverged { .. } => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> camb::Result<()> {
    let load = |c: &Common| ExperimentConfig::load(&c.config);
    match cli.command {
        Command::GenData(c) => {
            harness::gen_data(&load(&c)?)?;
        }
        Command::Train(a) => harness::train(&load(&a.common)?, a.seed, a.loss)?,
        Command::Probe(a) => harness::probe(&load(&a.common)?, a.seed, a.loss)?,
        Command::Explain(a) => harness::explain(&load(&a.common)?, a.seed, a.loss, a.options())?,
        Command::Evaluate(a) => {
            harness::evaluate(&load(&a.common)?, a.seed, a.loss, a.options())?;
        }
        Command::Report(c) => {
            let report = harness::build_report(&load(&c)?)?;
            for line in &report.directional {
                println!("{line}");
            }
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
