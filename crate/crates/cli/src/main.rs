mod ablate;
mod commands;
mod frozen;
mod imageio;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sca_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_) | Error::Parse { .. }) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "sca", version, about = "Segment-and-caption models on synthetic shape scenes")]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    work_dir: PathBuf,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the detection, caption, validation and LM corpora.
    GenData(commands::GenDataArgs),
    /// Weak-supervision training on class labels.
    Pretrain(commands::TrainArgs),
    /// Caption training, optionally from a pretrain checkpoint.
    Finetune(commands::TrainArgs),
    /// Caption one region of one image.
    Infer(commands::InferArgs),
    /// Score a checkpoint on a data split.
    Eval(commands::EvalArgs),
    /// Run an ablation grid and print a comparison table.
    Ablate(ablate::AblateArgs),
}

/// Resolves relative paths against `--work-dir`.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub work_dir: PathBuf,
}

impl Ctx {
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.work_dir.join(p)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let ctx = Ctx { work_dir: cli.work_dir };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&ctx, a),
        Command::Pretrain(a) => commands::train(&ctx, a, sca_core::trainer::Phase::Pretrain),
        Command::Finetune(a) => commands::train(&ctx, a, sca_core::trainer::Phase::Finetune),
        Command::Infer(a) => commands::infer(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Ablate(a) => ablate::ablate(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
