//! `gpn`: corpus generation, training, evaluation, QA-pair generation,
//! gradient checking and ablation for the generator-pretester network.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gpn::error::ErrorCategory;

use crate::config::Config;

/// Exit statuses. Clap's own usage errors exit with 2.
pub mod exit {
    pub const CHECK_FAILED: u8 = 1;
    pub const CONFIG: u8 = 3;
    pub const DATA: u8 = 4;
    pub const NUMERICAL: u8 = 5;
    pub const INTERNAL: u8 = 6;
}

#[derive(Parser, Debug)]
#[command(
    name = "gpn",
    version,
    about = "Joint video question-answer generation with a pretester"
)]
#[command(after_help = "\
Artifacts are written to {run.out_dir}/{run.name}/, each run alongside
a {command}-resolved-config.cfg that reproduces it.

Exit status: 0 success, 1 gradient check over tolerance, 2 usage,
3 configuration error, 4 data error, 5 numerical abort, 6 internal error.")]
struct Cli {
    /// Config file of `[section]` headers and `key = value` lines.
    #[arg(short, long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set train.max_steps=500`. Repeatable; wins over the file.
    #[arg(short = 's', long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
pub enum Command {
    /// Render the train/valid/test corpora into the data directory.
    GenData,
    /// Train on the train split; keeps the checkpoint with the lowest validation loss.
    Train,
    /// Score a checkpoint on a split: BLEU, ROUGE-L, CIDEr, QA accuracy, answerability.
    Eval,
    /// Write one generated QA pair per example of a split as JSON lines.
    Generate,
    /// Finite-difference check of every primitive and the full training loss.
    Gradcheck,
    /// Train and evaluate the base model and each variant over several seeds.
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Generate => "generate",
            Command::Gradcheck => "gradcheck",
            Command::Ablate => "ablate",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = Config::load(cli.config.as_deref(), &cli.overrides).and_then(|cfg| commands::run(cli.command, &cfg));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(exit::CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Config => exit::CONFIG,
                ErrorCategory::Data => exit::DATA,
                ErrorCategory::Numerical => exit::NUMERICAL,
                ErrorCategory::Usage => exit::INTERNAL,
            })
        }
    }
}
