use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Parser;

use spdec_cli::config::{RunConfig, PRESETS};

/// Partially observed optimal control of stochastic heat-type PDEs:
/// finite-element forward/backward solvers, branching particle filter and
/// conditional stochastic gradient descent.
#[derive(Parser, Debug)]
#[command(name = "spdec", version, about)]
struct Cli {
    /// Configuration file (TOML, as emitted into each run's manifest).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Start from a named preset instead of a config file.
    #[arg(long)]
    preset: Option<String>,

    /// Random seed (overrides the config value).
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory for the CSV artifacts and the manifest.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Repeatable key=value overrides, e.g. --set n_sgd=100.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// List the available presets and exit.
    #[arg(long)]
    list_presets: bool,

    /// Suppress per-interval progress lines.
    #[arg(long)]
    quiet: bool,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.list_presets {
        for p in PRESETS {
            println!("{p}");
        }
        return Ok(());
    }
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), None) => RunConfig::parse_file(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => bail!("choose a configuration: --config PATH or --preset NAME"),
        (Some(_), Some(_)) => unreachable!("clap conflict"),
    };
    for kv in &cli.sets {
        let Some((key, value)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got '{kv}'");
        };
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.display().to_string());
    }
    cfg.validate()?;

    let (report, out_dir) = spdec_cli::execute(&cfg, cli.quiet)?;
    println!(
        "done: final cost {:.6} (+-{:.6}), realized {:.6}; artifacts in {}",
        report.final_cost.0,
        report.final_cost.1,
        report.realized_cost,
        out_dir.display()
    );
    Ok(())
}
