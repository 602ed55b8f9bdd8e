//! Std-side companion to `spdec-core`: configuration and presets, run
//! management, CSV artifacts and deterministic worker parallelism.

pub mod artifacts;
pub mod config;
pub mod parallel;

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;

use spdec_core::control::{run_algorithm1, RunReport, SeededTruthNoise};

use config::RunConfig;

/// Execute one run and write its artifacts. Returns the report and the
/// output directory.
pub fn execute(cfg: &RunConfig, quiet: bool) -> Result<(RunReport, PathBuf)> {
    let (ops, spec, solver) = cfg.build()?;
    spdec_core::model::check_derivatives(&spec, &ops, cfg.seed ^ 0x5eed)
        .map_err(|e| anyhow::anyhow!("model self-check failed: {e}"))?;
    let noise = SeededTruthNoise {
        seed: cfg.seed,
        dt: ops.dt(),
    };
    let started = Instant::now();
    let report = run_algorithm1(&spec, &ops, &solver, &noise, |p| {
        if !quiet {
            println!(
                "outer {:>3}/{} t={:.3} cost={:.6} (+-{:.6}) ess={:.1}",
                p.outer + 1,
                p.n_outer,
                p.t,
                p.cost_mean,
                p.cost_stderr,
                p.ess
            );
        }
    })
    .map_err(|e| anyhow::anyhow!("solver failed: {e}"))?;
    let wall_ms = started.elapsed().as_millis();
    let out_dir = cfg
        .out
        .clone()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}_seed{}", cfg.preset, cfg.seed)));
    artifacts::write_report(&out_dir, cfg, &ops, &report, wall_ms)?;
    Ok((report, out_dir))
}
