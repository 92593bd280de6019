mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fesnet_core::data::{DatasetKind, Split};
use thiserror::Error;

use config::CliConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] fesnet_core::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("missing required setting {0}")]
    Missing(&'static str),

    #[error("output directory {} is not empty (pass --force to overwrite)", .0.display())]
    OutputNotEmpty(PathBuf),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("FESNET_THREADS: {0}")]
    Threads(String),

    #[error("{0}")]
    Failed(String),
}

#[derive(Debug, Parser)]
#[command(
    name = "fesnet",
    version,
    about = "Retinal vessel segmentation: train, evaluate, predict"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from scratch and write checkpoints, logs and the effective config.
    Train(Common),
    /// Score a checkpoint on one split and write the metric table and overlays.
    Evaluate(Common),
    /// Segment individual images.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Images to segment.
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Run the 64-bit finite-difference gradient suite.
    Gradcheck(Common),
    /// Print the per-layer parameter table.
    Params(Common),
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Debug, Args)]
struct Common {
    /// Flat TOML file with any of the run settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    split: Option<Split>,
    /// Comma-separated widths of the four prompt convolutional blocks.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn resolve(&self) -> Result<CliConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => CliConfig::load(p)?,
            None => CliConfig::default(),
        };
        if let Some(v) = self.dataset {
            cfg.dataset = v;
        }
        if let Some(v) = &self.root {
            cfg.root = Some(v.clone());
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = &self.checkpoint {
            cfg.checkpoint = Some(v.clone());
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = self.split {
            cfg.split = v;
        }
        if let Some(v) = &self.channels {
            cfg.channels = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sizes the global worker pool from `FESNET_THREADS` when set.
fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("FESNET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Threads(format!("expected a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Threads(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Train(c) => commands::train(&c.resolve()?, c.force),
        Command::Evaluate(c) => commands::evaluate(&c.resolve()?, c.force),
        Command::Predict { common, images } => commands::predict(&common.resolve()?, &images, common.force),
        Command::Gradcheck(c) => commands::gradcheck(&c.resolve()?),
        Command::Params(c) => commands::params(&c.resolve()?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
