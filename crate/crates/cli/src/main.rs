//! `sahnet`: synthetic cohorts, preprocessing, training, evaluation,
//! saliency maps and clinical statistics from one JSON configuration.

mod commands;
mod config;
mod data;
mod error;

use clap::{Parser, Subcommand};
use commands::Context;
use config::{Overrides, RunConfig};
use error::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "sahnet", version, about = "Mortality prediction from SAH head CT")]
struct Cli {
    /// Run configuration (JSON); defaults are used when absent.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Overrides `paths.out`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for per-subject work (prep, explain).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Raw HU NIfTI directory → normalized, registered volumes and QC JSON.
    Prep {
        #[arg(long, value_name = "ID")]
        subject: Option<String>,
    },
    /// Writes a synthetic cohort with lesion ground truth.
    Synth,
    /// Trains on a dataset directory; writes history and checkpoints.
    Train,
    /// Metrics JSON and ROC points from a checkpoint or a predictions CSV.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "ID")]
        subject: Option<String>,
    },
    /// Grad-CAM overlays and salient-region summaries.
    Explain {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "ID")]
        subject: Option<String>,
    },
    /// Odds ratios, chi-square and t-tests against the outcome column.
    Stats,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (checkpoint, subject) = match &cli.command {
        Command::Eval { checkpoint, subject } | Command::Explain { checkpoint, subject } => {
            (checkpoint.clone(), subject.clone())
        }
        Command::Prep { subject } => (None, subject.clone()),
        _ => (None, None),
    };
    let overrides = Overrides { seed: cli.seed, out: cli.out.clone(), checkpoint };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let threads = match cli.threads {
        Some(0) => return Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let ctx = Context { cfg, threads, subject };
    match cli.command {
        Command::Prep { .. } => commands::prep(&ctx),
        Command::Synth => commands::synth(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Eval { .. } => commands::eval(&ctx),
        Command::Explain { .. } => commands::explain(&ctx),
        Command::Stats => commands::stats(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
