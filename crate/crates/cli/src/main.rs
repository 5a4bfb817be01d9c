//! `viws`: batch commands for the video weather-removal pipeline.
//! Exit codes: 0 ok, 1 user error (config, data, paths), 2 internal.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;
use viws_core::Result;

#[derive(Parser)]
#[command(
    name = "viws",
    version,
    about = "Synthesize weather-degraded videos, train the restoration network, restore and score videos"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render degraded/clean video pairs and a dataset manifest.
    Synthesize(ConfigArg),
    /// Run the optimization loop with periodic validation.
    Train(TrainArgs),
    /// Restore one video directory with a trained checkpoint.
    Infer(InferArgs),
    /// Score restored frames against clean ground truth.
    Evaluate(ConfigArg),
}

#[derive(Args)]
struct ConfigArg {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Continue from the checkpoint instead of initializing fresh.
    #[arg(long)]
    resume: bool,
    /// Checkpoint path (defaults to `<output_root>/train/last.json`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the checkpoint named in the config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synthesize(a) => commands::cmd_synthesize(&RunConfig::load(&a.config)?),
        Command::Train(a) => commands::cmd_train(&RunConfig::load(&a.config)?, a.resume, a.checkpoint),
        Command::Infer(a) => commands::cmd_infer(&RunConfig::load(&a.config)?, a.checkpoint),
        Command::Evaluate(a) => commands::cmd_evaluate(&RunConfig::load(&a.config)?),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here with use_stderr() false
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user() { 1 } else { 2 })
        }
    }
}
