//! Command-line front end: generate, corrupt, train, eval and sweep.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "fliplab", version, about = "Preference optimization under instance-dependent label flipping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML config file. Missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["dpo", "cdpo", "rdpo", "fadpo"])]
    pub loss: Option<String>,
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Print the effective config as TOML and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Sample a world and a clean preference dataset.
    Generate,
    /// Fit a flip generator and corrupt the clean dataset.
    Corrupt,
    /// Train a policy on the corrupted dataset.
    Train,
    /// Evaluate a trained policy on a clean test split.
    Eval,
    /// Run the eta x loss x seed grid.
    Sweep,
}

impl Cli {
    /// Config file overlaid with command-line flags.
    pub fn effective_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(loss) = &self.loss {
            cfg.trainer.loss = loss.clone();
        }
        if let Some(eta) = self.eta {
            cfg.corruption.eta = eta;
        }
        if let Some(tau) = self.tau {
            cfg.corruption.tau = tau;
        }
        Ok(cfg)
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("FLIPLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().with_context(|| format!("FLIPLAB_THREADS={v:?} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.effective_config()?;
    if cli.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    cfg.validate()?;
    init_threads()?;
    let dir = cfg.out_dir.as_path();
    match cli.command {
        Command::Generate => commands::cmd_generate(&cfg, dir),
        Command::Corrupt => commands::cmd_corrupt(&cfg, dir),
        Command::Train => commands::cmd_train(&cfg, dir),
        Command::Eval => commands::cmd_eval(&cfg, dir),
        Command::Sweep => commands::cmd_sweep(&cfg, dir),
    }
}
