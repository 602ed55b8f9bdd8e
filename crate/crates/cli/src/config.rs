//! Run configuration: presets, file/flag parsing, validation and the
//! lowering into the core solver types.

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use spdec_core::adjoint::HxpMode;
use spdec_core::control::{LrDecay, ParticleSelect, RolloutMode, SolverConfig};
use spdec_core::fem::FemOperators;
use spdec_core::model::{HeatBenchmark, LinearGaussian, ModelSpec, Projection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticleSelectKey {
    Weighted,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutModeKey {
    FreshBrownian,
    SimulatedY,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HxpModeKey {
    ScalarPairing,
    Pointwise,
    AdjointPairing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecayKey {
    Constant,
    OneOverIter,
}

/// Complete, serializable run configuration. `emit` followed by `parse`
/// round-trips exactly; every key influencing numerics lands in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    /// Domain length L.
    pub length: f64,
    /// Horizon T.
    pub t_final: f64,
    pub dt: f64,
    pub n_elems: usize,
    /// Retained cylindrical channels.
    pub n_w: usize,
    /// Observation dimension d.
    pub obs_dim: usize,
    pub s_particles: usize,
    /// Branching interval (time units); must be a multiple of dt.
    pub branch_interval: f64,
    pub alpha: f64,
    pub n_sgd: usize,
    /// Realizations averaged per SGD iteration.
    pub batch: usize,
    pub n_cost_samples: usize,
    pub seed: u64,
    /// Worker threads for multi-seed/multi-sample tooling; never affects
    /// results.
    pub threads: usize,
    pub particle_select: ParticleSelectKey,
    pub rollout_mode: RolloutModeKey,
    pub hxp_mode: HxpModeKey,
    pub lr_decay: LrDecayKey,
    /// Amplitude of the initial sine profile.
    pub x0_amplitude: f64,
    /// Standard deviation of the Gaussian initial law (0 = deterministic).
    pub initial_spread: f64,
    /// Optional box constraints on the control, per node.
    pub u_min: Option<f64>,
    pub u_max: Option<f64>,
    pub out: Option<String>,
    pub dump_noise: bool,
    pub dump_paths: bool,
}

pub const PRESETS: &[&str] = &["heat_benchmark", "heat_uncontrolled", "linear_gaussian_test"];

impl RunConfig {
    /// Preset defaults; the benchmark preset carries the published parameter
    /// set (400 elements, dt = 0.01, T = 1, d = 5, alpha = 0.001, 1000 SGD
    /// iterations).
    pub fn preset(name: &str) -> Result<Self> {
        let base = RunConfig {
            preset: "heat_benchmark".into(),
            length: 10.0,
            t_final: 1.0,
            dt: 0.01,
            n_elems: 400,
            n_w: 50,
            obs_dim: 5,
            s_particles: 200,
            branch_interval: 0.05,
            alpha: 0.001,
            n_sgd: 1000,
            batch: 1,
            n_cost_samples: 256,
            seed: 1,
            threads: 1,
            particle_select: ParticleSelectKey::Weighted,
            rollout_mode: RolloutModeKey::FreshBrownian,
            hxp_mode: HxpModeKey::ScalarPairing,
            lr_decay: LrDecayKey::Constant,
            x0_amplitude: 0.6,
            initial_spread: 0.0,
            u_min: None,
            u_max: None,
            out: None,
            dump_noise: false,
            dump_paths: false,
        };
        match name {
            "heat_benchmark" => Ok(base),
            "heat_uncontrolled" => Ok(RunConfig {
                preset: name.into(),
                n_sgd: 0,
                ..base
            }),
            "linear_gaussian_test" => Ok(RunConfig {
                preset: name.into(),
                t_final: 0.5,
                n_elems: 32,
                n_w: 8,
                obs_dim: 3,
                n_sgd: 50,
                n_cost_samples: 128,
                x0_amplitude: 1.0,
                initial_spread: 0.25,
                ..base
            }),
            other => bail!(
                "unknown preset '{other}' (available: {})",
                PRESETS.join(", ")
            ),
        }
    }

    pub fn parse_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config file {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn emit(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| anyhow!("invalid value '{value}' for key '{key}': {e}"))
        }
        match key {
            "preset" => bail!("'preset' cannot be overridden with --set; use --preset"),
            "length" => self.length = parse(key, value)?,
            "t_final" => self.t_final = parse(key, value)?,
            "dt" => self.dt = parse(key, value)?,
            "n_elems" => self.n_elems = parse(key, value)?,
            "n_w" => self.n_w = parse(key, value)?,
            "obs_dim" => self.obs_dim = parse(key, value)?,
            "s_particles" => self.s_particles = parse(key, value)?,
            "branch_interval" => self.branch_interval = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "n_sgd" => self.n_sgd = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "n_cost_samples" => self.n_cost_samples = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "x0_amplitude" => self.x0_amplitude = parse(key, value)?,
            "initial_spread" => self.initial_spread = parse(key, value)?,
            "u_min" => self.u_min = Some(parse(key, value)?),
            "u_max" => self.u_max = Some(parse(key, value)?),
            "out" => self.out = Some(value.to_string()),
            "dump_noise" => self.dump_noise = parse(key, value)?,
            "dump_paths" => self.dump_paths = parse(key, value)?,
            "particle_select" => {
                self.particle_select = match value {
                    "weighted" => ParticleSelectKey::Weighted,
                    "uniform" => ParticleSelectKey::Uniform,
                    _ => bail!("invalid value '{value}' for key 'particle_select' (weighted|uniform)"),
                }
            }
            "rollout_mode" => {
                self.rollout_mode = match value {
                    "fresh_brownian" => RolloutModeKey::FreshBrownian,
                    "simulated_y" => RolloutModeKey::SimulatedY,
                    _ => bail!("invalid value '{value}' for key 'rollout_mode' (fresh_brownian|simulated_y)"),
                }
            }
            "hxp_mode" => {
                self.hxp_mode = match value {
                    "scalar_pairing" => HxpModeKey::ScalarPairing,
                    "pointwise" => HxpModeKey::Pointwise,
                    "adjoint_pairing" => HxpModeKey::AdjointPairing,
                    _ => bail!("invalid value '{value}' for key 'hxp_mode' (scalar_pairing|pointwise|adjoint_pairing)"),
                }
            }
            "lr_decay" => {
                self.lr_decay = match value {
                    "constant" => LrDecayKey::Constant,
                    "one_over_iter" => LrDecayKey::OneOverIter,
                    _ => bail!("invalid value '{value}' for key 'lr_decay' (constant|one_over_iter)"),
                }
            }
            other => bail!("unknown configuration key '{other}'"),
        }
        Ok(())
    }

    fn check_divides(&self, whole: f64, part_name: &str) -> Result<f64> {
        let ratio = whole / self.dt;
        let rounded = ratio.round();
        if (ratio - rounded).abs() > 1e-12 * ratio.abs().max(1.0) || rounded < 1.0 {
            bail!(
                "dt = {} must divide {part_name} = {whole} (ratio {ratio})",
                self.dt
            );
        }
        Ok(rounded)
    }

    pub fn n_steps(&self) -> Result<usize> {
        Ok(self.check_divides(self.t_final, "t_final")? as usize)
    }

    pub fn branch_steps(&self) -> Result<usize> {
        Ok(self.check_divides(self.branch_interval, "branch_interval")? as usize)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("length", self.length),
            ("t_final", self.t_final),
            ("dt", self.dt),
            ("branch_interval", self.branch_interval),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                bail!("'{name}' must be positive and finite, got {v}");
            }
        }
        if self.n_elems < 2 {
            bail!("'n_elems' must be at least 2, got {}", self.n_elems);
        }
        for (name, v) in [
            ("n_w", self.n_w),
            ("obs_dim", self.obs_dim),
            ("s_particles", self.s_particles),
            ("batch", self.batch),
            ("n_cost_samples", self.n_cost_samples),
            ("threads", self.threads),
        ] {
            if v == 0 {
                bail!("'{name}' must be at least 1");
            }
        }
        if self.n_w > self.n_elems - 1 {
            bail!(
                "'n_w' = {} exceeds the number of degrees of freedom ({})",
                self.n_w,
                self.n_elems - 1
            );
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            bail!("'alpha' must be finite and nonnegative, got {}", self.alpha);
        }
        let n_steps = self.n_steps()?;
        let branch_steps = self.branch_steps()? as usize;
        if n_steps % branch_steps != 0 {
            bail!(
                "'branch_interval' ({branch_steps} steps) must divide the horizon ({n_steps} steps)"
            );
        }
        match (self.u_min, self.u_max) {
            (Some(lo), Some(hi)) if lo >= hi => bail!("'u_min' must be below 'u_max'"),
            (Some(_), None) | (None, Some(_)) => {
                bail!("'u_min' and 'u_max' must be given together")
            }
            _ => {}
        }
        if !(self.x0_amplitude.is_finite() && self.initial_spread >= 0.0) {
            bail!("initial-condition parameters must be finite (spread nonnegative)");
        }
        Ok(())
    }

    /// Lower into the assembled operators, the model and the solver config.
    pub fn build(&self) -> Result<(FemOperators, ModelSpec, SolverConfig)> {
        self.validate()?;
        let ops = FemOperators::assemble(self.length, self.n_elems, self.dt)
            .map_err(|e| anyhow!("{e}"))?;
        let mut spec = match self.preset.as_str() {
            "heat_benchmark" | "heat_uncontrolled" => HeatBenchmark {
                n_w: self.n_w,
                d: self.obs_dim,
                x0_amplitude: self.x0_amplitude,
                ..Default::default()
            }
            .build(&ops),
            "linear_gaussian_test" => LinearGaussian {
                n_w: self.n_w,
                d: self.obs_dim,
                x0_amplitude: self.x0_amplitude,
                initial_spread: self.initial_spread,
                ..Default::default()
            }
            .build(&ops),
            other => bail!("unknown preset '{other}'"),
        };
        if let (Some(lo), Some(hi)) = (self.u_min, self.u_max) {
            spec.projection = Projection::Box { lo, hi };
        }
        let solver = SolverConfig {
            n_steps: self.n_steps()?,
            branch_every: self.branch_steps()?,
            s_particles: self.s_particles,
            alpha: self.alpha,
            n_sgd: self.n_sgd,
            batch: self.batch,
            n_cost_samples: self.n_cost_samples,
            seed: self.seed,
            particle_select: match self.particle_select {
                ParticleSelectKey::Weighted => ParticleSelect::Weighted,
                ParticleSelectKey::Uniform => ParticleSelect::Uniform,
            },
            rollout_mode: match self.rollout_mode {
                RolloutModeKey::FreshBrownian => RolloutMode::FreshBrownian,
                RolloutModeKey::SimulatedY => RolloutMode::SimulatedY,
            },
            hxp_mode: match self.hxp_mode {
                HxpModeKey::ScalarPairing => HxpMode::ScalarPairing,
                HxpModeKey::Pointwise => HxpMode::Pointwise,
                HxpModeKey::AdjointPairing => HxpMode::AdjointPairing,
            },
            lr_decay: match self.lr_decay {
                LrDecayKey::Constant => LrDecay::Constant,
                LrDecayKey::OneOverIter => LrDecay::OneOverIter,
            },
        };
        Ok((ops, spec, solver))
    }
}
