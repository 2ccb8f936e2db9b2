//! `fedzkt` command-line entry point.

mod config;
mod runner;

use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "fedzkt",
    about = "Data-free federated distillation experiments",
    version
)]
struct Cli {
    /// Override the federation seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory from the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run { config: PathBuf },
    /// Build and write the partition plan without training.
    Partition { config: PathBuf },
    /// Check analytic gradients against finite differences.
    Gradcheck,
    /// Merge metrics.csv files under a directory into long-format plot data.
    Plotdata { dir: PathBuf, out: PathBuf },
}

fn load_config(path: &Path, cli: &Cli) -> Result<config::ExperimentConfig> {
    let mut cfg = config::parse_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.federation.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run { config } => {
            let cfg = load_config(config, &cli)?;
            runner::run_experiment(&cfg)
        }
        Command::Partition { config } => {
            let cfg = load_config(config, &cli)?;
            runner::emit_partition(&cfg)
        }
        Command::Gradcheck => runner::run_gradcheck(cli.seed.unwrap_or(20240817)),
        Command::Plotdata { dir, out } => {
            let out = cli.out.as_ref().unwrap_or(out);
            runner::emit_plot_data(dir, out)
        }
    }
}
