//! `vista`: phantom simulation, source pretraining, test-time adaptation
//! and evaluation.
//!
//! Exit codes: 0 success, 2 usage, configuration or input errors, 3
//! numerical failure (diverged training, non-finite adaptation loss).

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use vista::config::Variant;

use commands::{AdaptArgs, Method};
use config::{AdaptConfig, PretrainConfig, SimulateConfig};

#[derive(Parser)]
#[command(name = "vista", version = manifest::VERSION, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Template {
    Source,
    Target,
    Pretrain,
    Adapt,
}

#[derive(Subcommand)]
enum Command {
    /// Print a complete configuration template with default values.
    Config {
        #[arg(value_enum)]
        kind: Template,
    },
    /// Generate a phantom cohort.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the source model on a labeled cohort.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier pretrain run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Adapt online over a target cohort, in case order.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "vista")]
        method: Method,
        #[arg(long, default_value = "full")]
        variant: Variant,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score adaptation runs against cohort labels; repeat --pred for seeds.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "pred", required = true)]
        preds: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "run")]
        name: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { kind } => {
            let text = match kind {
                Template::Source => config::render(&SimulateConfig::source())?,
                Template::Target => config::render(&SimulateConfig::target())?,
                Template::Pretrain => config::render(&PretrainConfig::default())?,
                Template::Adapt => config::render(&AdaptConfig::default())?,
            };
            print!("{text}");
        }
        Command::Simulate { config, out } => {
            let m = commands::simulate(&config, &out)?;
            eprintln!("simulated cohort in {} ({:.1}s)", out.display(), m.wall_clock_secs);
        }
        Command::Pretrain { config, data, out, resume } => {
            let m = commands::pretrain(&config, &data, &out, resume.as_deref())?;
            eprintln!("checkpoint written to {} ({:.1}s)", out.display(), m.wall_clock_secs);
        }
        Command::Adapt { config, checkpoint, data, out, method, variant, seed } => {
            let args = AdaptArgs {
                config: &config,
                checkpoint: &checkpoint,
                data: &data,
                out: &out,
                method,
                variant,
                seed,
            };
            let m = commands::adapt(args)?;
            eprintln!("adapted stream written to {} ({:.1}s)", out.display(), m.wall_clock_secs);
        }
        Command::Evaluate { data, preds, out, name } => {
            let (_, table) = commands::evaluate(&data, &preds, &name, &out)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|c| {
        matches!(c.downcast_ref::<vista::Error>(), Some(vista::Error::Divergence { .. } | vista::Error::NonFiniteLoss { .. }))
    });
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
