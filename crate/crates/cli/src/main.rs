//! Operator entry point: dataset generation, training, evaluation,
//! inference, gradient checking, and FLOPs reporting.

mod commands;
mod config;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    Usage(String),
    /// Missing or malformed data, checkpoints, or images (exit 2).
    Data(String),
    /// NaN loss or failed gradient check (exit 3).
    Numerical(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> CliError {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> CliError {
        CliError::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> CliError {
        CliError::Numerical(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "abc", about = "Infrared small-target segmentation toolkit")]
struct Cli {
    /// Run configuration file (flat key=value lines, '#' comments)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override for anything randomized
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output path (directory or file, depending on the subcommand)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory (images, masks, manifest)
    GenData,
    /// Train a model; writes per-epoch log and checkpoints to --out
    Train,
    /// Evaluate a checkpoint: metrics to stdout, ROC CSV to --out
    Eval {
        /// Checkpoint to evaluate
        checkpoint: PathBuf,
    },
    /// Run one image through a checkpoint; writes mask and probability PGMs
    Infer {
        /// Checkpoint to load
        checkpoint: PathBuf,
        /// Input image (P5 PGM at the configured resolution)
        image: PathBuf,
    },
    /// Finite-difference check of every backward rule plus the full network
    Gradcheck {
        /// Corrupt one result on purpose (test hook for the failure path)
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Report multiply-accumulate counts per model width and their ratios
    Flops,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = commands::Common {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::GenData => commands::gen_data(common),
        Command::Train => commands::train(common),
        Command::Eval { checkpoint } => commands::eval(common, &checkpoint),
        Command::Infer { checkpoint, image } => commands::infer(common, &checkpoint, &image),
        Command::Gradcheck { inject_fault } => commands::gradcheck(common, inject_fault),
        Command::Flops => commands::flops(common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
