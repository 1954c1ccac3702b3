mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::commands::CheckFailure;
use crate::config::RunConfig;

/// Three-pathway video action recognition: data, training, evaluation and
/// diagnostics.
#[derive(Debug, Parser)]
#[command(name = "tristream", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Plain-text `key = value` config with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Run seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one config key, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic train/test datasets.
    GenData,
    /// Train and write checkpoint/ and epochs.csv.
    Train,
    /// Score a classifier: metrics.json and confusion.csv.
    Eval,
    /// Score a detector: detections.csv, ap_per_class.csv and metrics.json.
    Detect,
    /// Finite-difference gradient checks for every op and head.
    Gradcheck,
    /// Sweep Slow stride, head and Fast width ratio: ablation.csv.
    Ablate,
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.set, cli.seed)?;
    let out = &cli.out;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg, out),
        Command::Train => commands::train(&cfg, out),
        Command::Eval => commands::eval(&cfg, out),
        Command::Detect => commands::detect(&cfg, out),
        Command::Gradcheck => commands::gradcheck(&cfg, out),
        Command::Ablate => commands::ablate(&cfg, out),
    }
}

/// 2 for numerical failures, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        e.downcast_ref::<CheckFailure>().is_some()
            || e.downcast_ref::<tristream::Error>().is_some_and(|e| e.is_numerical())
    });
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
