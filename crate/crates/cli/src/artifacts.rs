//! CSV artifacts and the run manifest. Floats are written with 17
//! significant digits so reruns diff bit-exactly.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};

use spdec_core::control::RunReport;
use spdec_core::fem::FemOperators;

use crate::config::RunConfig;

pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_lines(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{header}")?;
    for row in rows {
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}

fn field_header(prefix: &str, n: usize) -> String {
    let mut h = String::from("k,t");
    for i in 0..n {
        h.push(',');
        h.push_str(prefix);
        h.push_str(&i.to_string());
    }
    h
}

fn field_row(k: usize, t: f64, values: &[f64]) -> String {
    let mut row = format!("{k},{}", fmt_float(t));
    for v in values {
        row.push(',');
        row.push_str(&fmt_float(*v));
    }
    row
}

/// Write the full artifact set for one run into `dir`.
pub fn write_report(
    dir: &Path,
    cfg: &RunConfig,
    ops: &FemOperators,
    report: &RunReport,
    wall_ms: u128,
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let dt = ops.dt();

    write_lines(
        &dir.join("cost_trace.csv"),
        "outer,t,cost_mean,cost_stderr",
        report.cost_trace.iter().map(|p| {
            format!(
                "{},{},{},{}",
                p.outer,
                fmt_float(p.t),
                fmt_float(p.mean),
                fmt_float(p.stderr)
            )
        }),
    )?;

    write_lines(
        &dir.join("sgd_trace.csv"),
        "outer,iteration,grad_norm",
        report
            .sgd_trace
            .iter()
            .map(|p| format!("{},{},{}", p.outer, p.iter, fmt_float(p.grad_norm))),
    )?;

    write_lines(
        &dir.join("filter_trace.csv"),
        "t,ess,post_sq_norm,post_mode1,w_min,w_max",
        report.filter_trace.iter().map(|p| {
            format!(
                "{},{},{},{},{},{}",
                fmt_float(p.t),
                fmt_float(p.ess),
                fmt_float(p.post_sq_norm),
                fmt_float(p.post_mode1),
                fmt_float(p.w_min),
                fmt_float(p.w_max)
            )
        }),
    )?;

    write_lines(
        &dir.join("control_final.csv"),
        &field_header("u_", ops.n_dof()),
        report
            .schedule
            .fields
            .iter()
            .enumerate()
            .map(|(k, f)| field_row(k, k as f64 * dt, f.values())),
    )?;

    write_lines(
        &dir.join("state_snapshots.csv"),
        &field_header("x_", ops.n_dof()),
        report
            .truth
            .iter()
            .enumerate()
            .map(|(k, f)| field_row(k, k as f64 * dt, f.values())),
    )?;

    if cfg.dump_paths {
        let d = report.observations.y.first().map_or(0, |y| y.len());
        write_lines(
            &dir.join("observations.csv"),
            &field_header("y_", d),
            report
                .observations
                .y
                .iter()
                .enumerate()
                .map(|(k, y)| field_row(k, k as f64 * dt, y)),
        )?;
    }

    if cfg.dump_noise {
        use spdec_core::control::{SeededTruthNoise, TruthNoise};
        let src = SeededTruthNoise {
            seed: cfg.seed,
            dt,
        };
        let n_steps = report.truth.len().saturating_sub(1);
        let mut header = String::from("k,t");
        for i in 0..cfg.n_w {
            header.push_str(&format!(",dw_{i}"));
        }
        for j in 0..cfg.obs_dim {
            header.push_str(&format!(",db_{j}"));
        }
        let mut dw = vec![0.0; cfg.n_w];
        let mut db = vec![0.0; cfg.obs_dim];
        write_lines(
            &dir.join("noise_truth.csv"),
            &header,
            (0..n_steps).map(|k| {
                src.fill_dw(k, &mut dw);
                src.fill_db(k, &mut db);
                let mut row = format!("{k},{}", fmt_float(k as f64 * dt));
                for v in dw.iter().chain(db.iter()) {
                    row.push(',');
                    row.push_str(&fmt_float(*v));
                }
                row
            }),
        )?;
    }

    let manifest = Manifest {
        config: cfg.clone(),
        run: ManifestRun {
            seed: report.seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            git_revision: git_revision(),
            wall_ms: wall_ms as u64,
            realized_cost: report.realized_cost,
            final_cost_mean: report.final_cost.0,
            final_cost_stderr: report.final_cost.1,
        },
    };
    fs::write(
        dir.join("manifest.toml"),
        toml::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}

#[derive(serde::Serialize)]
struct Manifest {
    config: RunConfig,
    run: ManifestRun,
}

#[derive(serde::Serialize)]
struct ManifestRun {
    seed: u64,
    crate_version: String,
    git_revision: String,
    wall_ms: u64,
    realized_cost: f64,
    final_cost_mean: f64,
    final_cost_stderr: f64,
}

fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}
