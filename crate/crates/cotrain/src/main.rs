use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cotrain::config::load_config;
use cotrain::error::Error;
use cotrain::runner;

#[derive(Parser)]
#[command(name = "cotrain", about = "Noise-robust multi-agent training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set group.agents=4
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root directory for run artifacts.
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured method on a noisy labelled set.
    Train(CommonArgs),
    /// Run the learn-label loop over the unlabelled parts.
    Nroll(CommonArgs),
    /// Estimate the label-noise rate and export the similarity histogram.
    EstimateNoise(CommonArgs),
    /// Evaluate a stored checkpoint.
    Evaluate(CommonArgs),
    /// Generate (and optionally corrupt) a dataset CSV.
    GenData(CommonArgs),
}

fn run(args: &CommonArgs, f: impl FnOnce(&cotrain::config::ExperimentConfig, &std::path::Path) -> cotrain::Result<()>) -> cotrain::Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    cfg.validate()?;
    f(&cfg, &args.runs_dir)
}

fn main() -> ExitCode {
    cotrain::init_thread_pool();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => run(args, runner::run_train),
        Command::Nroll(args) => run(args, |cfg, root| runner::run_nroll_cmd(cfg, root).map(|_| ())),
        Command::EstimateNoise(args) => run(args, runner::run_estimate_noise),
        Command::Evaluate(args) => run(args, runner::run_evaluate),
        Command::GenData(args) => run(args, runner::run_gen_data),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::Parse { .. } => ExitCode::from(2),
                Error::Diverged(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
