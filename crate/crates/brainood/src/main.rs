//! `brainood` — synthetic multi-site connectivity benchmark, invariant
//! subgraph classifier, and interpretation tools behind one subcommand
//! interface.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use brainood::commands;
use brainood::config::{Ablation, Mode, Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "brainood",
    version,
    about = "Out-of-distribution-robust brain-network classification on connectivity matrices",
    after_help = "Set BRAINOOD_LOG={error,info,debug} for progress logging."
)]
struct Cli {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Root random seed (overrides the config for generator and trainer).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Parallel fold workers for `cv`.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Disable a model component (repeatable).
    #[arg(long, global = true, value_enum)]
    ablate: Vec<Ablation>,

    /// Subgraph scoring at evaluation: deterministic soft scores or k
    /// binarized draws.
    #[arg(long, global = true, value_enum, default_value_t = Mode::Soft)]
    mode: Mode,

    /// Output directory (overrides the config).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-site dataset (manifest + CSV matrices).
    Generate,
    /// Build the site-holdout cross-validation split plan.
    Split,
    /// Train one fold; writes best-validation and final checkpoints.
    Train,
    /// Evaluate a saved checkpoint on a fold's test split.
    Eval,
    /// Train and evaluate every fold; writes the aggregate results file.
    Cv,
    /// Aggregate edge scores into a score map, top-k list, and recovery AUC.
    Interpret,
    /// Run the built-in gradient/oracle/determinism checks.
    Selftest,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: cli.seed,
        out: cli.out,
        ablate: cli.ablate,
    });
    match cli.command {
        Command::Generate => {
            commands::cmd_generate(&cfg)?;
        }
        Command::Split => {
            commands::cmd_split(&cfg)?;
        }
        Command::Train => {
            commands::cmd_train(&cfg)?;
        }
        Command::Eval => {
            commands::cmd_eval(&cfg, cli.mode)?;
        }
        Command::Cv => {
            commands::cmd_cv(&cfg, cli.jobs)?;
        }
        Command::Interpret => {
            commands::cmd_interpret(&cfg)?;
        }
        Command::Selftest => {
            commands::cmd_selftest()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new()
            .filter("BRAINOOD_LOG")
            .default_filter_or("error"),
    )
    .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("brainood: error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
