//! `csifm`: generate datasets, pretrain encoders, evaluate transfer.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime or numeric
//! failure (including invariant violations during evaluation).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use csifm_core::Error;

/// Overrides `output_dir` from the config when set.
pub const OUTPUT_ROOT_ENV: &str = "CSIFM_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "csifm", version, about = "Physics-guided CSI masked-autoencoder pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Param,
    Stage1,
    Stage2,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    None,
    #[value(name = "no_sa")]
    NoSa,
    #[value(name = "no_pa")]
    NoPa,
    #[value(name = "plain_mae")]
    PlainMae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Los,
    Pos,
    Beam,
    Chest,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train/val/test datasets and manifests.
    Generate {
        /// TOML override file (layered over the built-in defaults).
        config: PathBuf,
    },
    /// Run the parameter-encoder and/or MAE pretraining stages.
    Pretrain {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        #[arg(long, value_enum, default_value = "none")]
        ablation: AblationArg,
    },
    /// Train downstream heads on frozen encoders and write CSV reports.
    Eval {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        task: TaskArg,
        /// Encoder checkpoint; repeat to compare encoders.
        #[arg(long, required = true)]
        encoder: Vec<PathBuf>,
    },
    /// Print dataset manifest or checkpoint metadata.
    Inspect { path: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate { config } => commands::generate(&config),
        Command::Pretrain { config, stage, ablation } => commands::pretrain(&config, stage, ablation),
        Command::Eval { config, task, encoder } => commands::eval(&config, task, &encoder),
        Command::Inspect { path } => commands::inspect(&path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
