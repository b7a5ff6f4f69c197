//! `slatlab` command-line driver.
//!
//! Dotted overrides such as `--train.epsilon=0.2` may appear anywhere after
//! the verb and are applied on top of the config file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slatlab::config::{ExperimentConfig, RawConfig};
use slatlab::experiment::{self, RunOptions};
use slatlab::SlatError;

#[derive(Parser)]
#[command(name = "slatlab", version, about = "Single-step latent adversarial training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// INI config file; built-in toy defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoint, landscape and summary.
    Train {
        #[command(flatten)]
        common: Common,
        /// Skip training and evaluate the checkpoint instead.
        #[arg(long)]
        eval_only: bool,
        /// Checkpoint to evaluate, or to start training from.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (same as `train --eval-only`).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// One run per value of a config key, merged into sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted config key, e.g. train.epsilon.
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. 2/255,4/255,8/255.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Loss landscape of a checkpoint around the first evaluation examples.
    Landscape {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Standard training, FGSM AT and SLAT on the 2-D toy task.
    ToyDemo {
        #[command(flatten)]
        common: Common,
    },
}

/// Splits `--section.key=value` arguments off before clap sees them.
fn split_overrides(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<String>) {
    let (overrides, rest) = args.into_iter().partition(|a| {
        a.strip_prefix("--")
            .and_then(|s| s.split_once('='))
            .is_some_and(|(k, _)| k.contains('.'))
    });
    (rest, overrides)
}

fn raw_config(common: &Common, overrides: &[String]) -> Result<RawConfig, SlatError> {
    let mut raw = match &common.config {
        Some(p) => RawConfig::read(p)?,
        None => RawConfig::default(),
    };
    raw.apply_overrides(overrides)?;
    if let Some(s) = common.seed {
        raw.set("seed", &s.to_string());
    }
    if let Some(o) = &common.out {
        raw.set("output.dir", &o.to_string_lossy());
    }
    Ok(raw)
}

fn print_json(v: &impl serde::Serialize) -> Result<(), SlatError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn execute(cli: Cli, overrides: &[String]) -> Result<(), SlatError> {
    match cli.command {
        Command::Train { common, eval_only, ckpt } => {
            let cfg = ExperimentConfig::from_raw(&raw_config(&common, overrides)?)?;
            let out = experiment::run(&cfg, &RunOptions { eval_only, ckpt })?;
            print_json(&out.summary)
        }
        Command::Eval { common, ckpt } => {
            let cfg = ExperimentConfig::from_raw(&raw_config(&common, overrides)?)?;
            let out = experiment::run(&cfg, &RunOptions { eval_only: true, ckpt })?;
            print_json(&out.summary)
        }
        Command::Sweep { common, param, values } => {
            let raw = raw_config(&common, overrides)?;
            let rows = experiment::sweep(&raw, &param, &values, experiment::sweep_threads())?;
            print_json(&rows)
        }
        Command::Landscape { common, ckpt } => {
            let cfg = ExperimentConfig::from_raw(&raw_config(&common, overrides)?)?;
            let grid = experiment::landscape(&cfg, &ckpt)?;
            print!("{}", grid.to_csv());
            Ok(())
        }
        Command::ToyDemo { common } => {
            let cfg = ExperimentConfig::from_raw(&raw_config(&common, overrides)?)?;
            print_json(&experiment::toy_demo(&cfg)?)
        }
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args());
    let cli = Cli::parse_from(args);
    match execute(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ SlatError::NonFiniteGradient { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
