//! Conditional stochastic gradient descent over the receding control grid,
//! driven by the particle filter: the full optimization loop.
//!
//! At each branching node `t_n` the remaining schedule is optimized by
//! repeatedly (i) drawing a particle from the current cloud, (ii) rolling
//! out one hypothetical future under the current schedule, (iii) solving the
//! backward equations along that single realization and (iv) descending the
//! control gradient. The node's control is then frozen, the synthetic truth
//! and its observations advance one interval, and the cloud is reweighted
//! and rebranched.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::adjoint::{backward_sweep, HxpMode};
use crate::error::{Error, Result};
use crate::fem::{Field, FemOperators};
use crate::filter::ParticleCloud;
use crate::forward::{step_particle_with_h, step_truth, ObservationPath};
use crate::math;
use crate::model::ModelSpec;
use crate::noise::{block_rng, fill_normal, StreamId, INIT_STEP};

/// How the hypothetical future in the SGD rollout is driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RolloutMode {
    /// Draw fresh Brownian `(dW, dB)` and propagate the reference-measure
    /// dynamics; backward residuals are the `dB` themselves.
    #[default]
    FreshBrownian,
    /// Draw a fresh Brownian observation path `dY` and propagate the
    /// observation-driven particle dynamics; backward residuals are
    /// `dY - h dt`.
    SimulatedY,
}

/// How the rollout's starting particle is selected from the cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParticleSelect {
    /// Proportional to the current normalized weights.
    #[default]
    Weighted,
    /// Uniformly over the population.
    Uniform,
}

/// Learning-rate schedule for the SGD updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrDecay {
    #[default]
    Constant,
    /// `alpha / (iteration + 1)`.
    OneOverIter,
}

/// Solver parameters. Together with a model and a seed these determine the
/// run bit-for-bit.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Number of fine time steps over the horizon (`T = n_steps * dt`).
    pub n_steps: usize,
    /// Fine steps per branching/control interval.
    pub branch_every: usize,
    pub s_particles: usize,
    pub alpha: f64,
    pub n_sgd: usize,
    /// Independent realizations averaged per SGD iteration.
    pub batch: usize,
    pub n_cost_samples: usize,
    pub seed: u64,
    pub particle_select: ParticleSelect,
    pub rollout_mode: RolloutMode,
    pub hxp_mode: HxpMode,
    pub lr_decay: LrDecay,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branch_every == 0 {
            return Err(Error::InvalidConfig("branch_every must be >= 1".into()));
        }
        if self.n_steps > 0 && self.n_steps % self.branch_every != 0 {
            return Err(Error::InvalidConfig(alloc::format!(
                "branch interval ({} steps) must divide the horizon ({} steps)",
                self.branch_every,
                self.n_steps
            )));
        }
        if self.s_particles == 0 {
            return Err(Error::InvalidConfig("s_particles must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be >= 1".into()));
        }
        if self.n_cost_samples == 0 {
            return Err(Error::InvalidConfig("n_cost_samples must be >= 1".into()));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(alloc::format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    fn n_outer(&self) -> usize {
        if self.n_steps == 0 {
            0
        } else {
            self.n_steps / self.branch_every
        }
    }
}

/// The control trajectory on the fine grid: one field per time node
/// `k = first_step ..= first_step + fields.len() - 1`.
#[derive(Debug, Clone)]
pub struct ControlSchedule {
    pub first_step: usize,
    pub fields: Vec<Field>,
    pub iteration: usize,
    pub alpha: f64,
    pub decay: LrDecay,
}

impl ControlSchedule {
    pub fn zeros(
        n_dof: usize,
        first_step: usize,
        n_nodes: usize,
        alpha: f64,
        decay: LrDecay,
    ) -> Self {
        ControlSchedule {
            first_step,
            fields: (0..n_nodes).map(|_| Field::zeros(n_dof)).collect(),
            iteration: 0,
            alpha,
            decay,
        }
    }

    pub fn last_step(&self) -> usize {
        self.first_step + self.fields.len() - 1
    }

    /// Control at global step `k`.
    pub fn field_at(&self, k: usize) -> &Field {
        &self.fields[k - self.first_step]
    }

    pub fn effective_alpha(&self) -> f64 {
        match self.decay {
            LrDecay::Constant => self.alpha,
            LrDecay::OneOverIter => self.alpha / (self.iteration + 1) as f64,
        }
    }

    /// One projected gradient step on the tail `k = tail_start ..`, then
    /// advance the iteration counter.
    pub fn sgd_step(&mut self, tail_start: usize, psis: &[Field], spec: &ModelSpec) {
        let a = self.effective_alpha();
        let rel = tail_start - self.first_step;
        for (offset, psi) in psis.iter().enumerate() {
            let u = &mut self.fields[rel + offset];
            u.axpy(-a, psi);
            spec.project(u);
        }
        self.iteration += 1;
    }
}

/// Control gradient representer at one `(x, u)` with adjoint data `(p, z2)`:
/// the discrete-L2 Riesz representer of the Hamiltonian's control derivative,
/// `M^{-1} [ b_u .* (M p) + w .* l_u ] + sum_j z2^j r_u^j`,
/// with `r_u^j` the control-derivative representers of the observation map.
pub fn gradient_field(
    spec: &ModelSpec,
    x: &Field,
    u: &Field,
    p: &Field,
    z2_row: &[f64],
    ops: &FemOperators,
) -> Result<Field> {
    let n = ops.n_dof();
    for len in [x.len(), u.len(), p.len()] {
        if len != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                got: len,
            });
        }
    }
    if z2_row.len() != spec.obs_dim() {
        return Err(Error::ShapeMismatch {
            expected: spec.obs_dim(),
            got: z2_row.len(),
        });
    }
    let kappa = ops.mass_matvec(p)?;
    let kv = kappa.values();
    let xv = x.values();
    let uv = u.values();
    let w = ops.quad_weights();
    let mut tmp = vec![0.0; n];
    for i in 0..n {
        tmp[i] = (spec.drift.du)(xv[i], uv[i]) * kv[i] + w[i] * (spec.running.du)(xv[i], uv[i]);
    }
    let mut psi = ops.mass_solve(&Field::new(tmp)?)?;
    if z2_row.iter().any(|&z| z != 0.0) {
        let grad = spec.observation_gradient(x, u, ops)?;
        for (z2, rep) in z2_row.iter().zip(&grad.du) {
            if *z2 != 0.0 {
                psi.axpy(*z2, rep);
            }
        }
    }
    Ok(psi)
}

/// Source of the synthetic truth's driving increments. Abstracted so tests
/// can perturb future noise and check causality of the schedule.
pub trait TruthNoise {
    fn fill_dw(&self, k: usize, out: &mut [f64]);
    fn fill_db(&self, k: usize, out: &mut [f64]);
}

/// Counter-based truth noise derived from the run seed.
pub struct SeededTruthNoise {
    pub seed: u64,
    pub dt: f64,
}

impl TruthNoise for SeededTruthNoise {
    fn fill_dw(&self, k: usize, out: &mut [f64]) {
        let mut rng = block_rng(self.seed, StreamId::truth_state(), k as u64);
        fill_normal(&mut rng, out, math::sqrt(self.dt));
    }

    fn fill_db(&self, k: usize, out: &mut [f64]) {
        let mut rng = block_rng(self.seed, StreamId::truth_obs(), k as u64);
        fill_normal(&mut rng, out, math::sqrt(self.dt));
    }
}

/// One hypothetical-future rollout from `x_start` at `first_step` under the
/// tail controls. Returns the states, the cylindrical increments and the
/// backward residual rows.
fn rollout(
    x_start: Field,
    tail_controls: &[Field],
    first_step: usize,
    seed: u64,
    stream: StreamId,
    mode: RolloutMode,
    spec: &ModelSpec,
    ops: &FemOperators,
) -> Result<(Vec<Field>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n_steps = tail_controls.len();
    let n_w = spec.n_w();
    let d = spec.obs_dim();
    let dt = ops.dt();
    let sd = math::sqrt(dt);
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(x_start);
    let mut dw_rows = Vec::with_capacity(n_steps);
    let mut res_rows = Vec::with_capacity(n_steps);
    for k_rel in 0..n_steps {
        let k = first_step + k_rel;
        let mut rng = block_rng(seed, stream, k as u64);
        let mut dw = vec![0.0; n_w];
        let mut obs = vec![0.0; d];
        fill_normal(&mut rng, &mut dw, sd);
        fill_normal(&mut rng, &mut obs, sd);
        let u_k = &tail_controls[k_rel];
        let next = match mode {
            RolloutMode::FreshBrownian => {
                let x = step_truth(&states[k_rel], u_k, &dw, &obs, spec, ops, k)?;
                res_rows.push(obs);
                x
            }
            RolloutMode::SimulatedY => {
                let h = spec.observe(&states[k_rel], u_k, ops)?;
                let x =
                    step_particle_with_h(&states[k_rel], u_k, &dw, &obs, &h, spec, ops, k)?;
                let res: Vec<f64> = obs
                    .iter()
                    .zip(&h)
                    .map(|(dy, hj)| dy - hj * dt)
                    .collect();
                res_rows.push(res);
                x
            }
        };
        states.push(next);
        dw_rows.push(dw);
    }
    Ok((states, dw_rows, res_rows))
}

fn select_particle(cloud: &ParticleCloud, select: ParticleSelect, u: f64) -> usize {
    let s = cloud.population();
    match select {
        ParticleSelect::Uniform => ((u * s as f64) as usize).min(s - 1),
        ParticleSelect::Weighted => {
            let mut cum = 0.0;
            for (i, w) in cloud.normalized_weights().iter().enumerate() {
                cum += w;
                if u < cum {
                    return i;
                }
            }
            s - 1
        }
    }
}

/// The inner optimization loop at one branching node: `n_iters` single-
/// realization gradient steps on the remaining schedule. `first_iter` offsets
/// the substream indices so the loop can be resumed.
#[allow(clippy::too_many_arguments)]
pub fn inner_sgd(
    spec: &ModelSpec,
    ops: &FemOperators,
    cfg: &SolverConfig,
    cloud: &ParticleCloud,
    schedule: &mut ControlSchedule,
    tail_start: usize,
    outer: u32,
    first_iter: usize,
    n_iters: usize,
    mut on_iteration: impl FnMut(usize, f64),
) -> Result<()> {
    let n_rollout = schedule.last_step() - tail_start;
    let dt = ops.dt();
    for it in first_iter..first_iter + n_iters {
        let mut pick_rng = block_rng(
            cfg.seed,
            StreamId::particle_pick(outer, it as u32),
            INIT_STEP,
        );
        let idx = select_particle(cloud, cfg.particle_select, pick_rng.random::<f64>());
        let mut psis: Vec<Field> = Vec::new();
        for b in 0..cfg.batch {
            let rel = tail_start - schedule.first_step;
            let tail = &schedule.fields[rel..rel + n_rollout];
            let (states, dw_rows, res_rows) = rollout(
                cloud.positions()[idx].clone(),
                tail,
                tail_start,
                cfg.seed,
                StreamId::rollout(outer, it as u32, b as u32),
                cfg.rollout_mode,
                spec,
                ops,
            )?;
            let sweep =
                backward_sweep(&states, tail, &dw_rows, &res_rows, spec, ops, cfg.hxp_mode)?;
            if psis.is_empty() {
                psis = sweep.psi;
            } else {
                for (acc, psi) in psis.iter_mut().zip(&sweep.psi) {
                    acc.axpy(1.0, psi);
                }
            }
        }
        if cfg.batch > 1 {
            let inv = 1.0 / cfg.batch as f64;
            for psi in &mut psis {
                psi.scale(inv);
            }
        }
        let mut norm_sq = 0.0;
        for psi in &psis {
            norm_sq += dt * ops.inner_product(psi, psi)?;
        }
        schedule.sgd_step(tail_start, &psis, spec);
        on_iteration(it, math::sqrt(norm_sq));
    }
    Ok(())
}

/// One Monte-Carlo cost sample: simulate the reference-measure dynamics from
/// a fresh initial draw under the full schedule and accumulate the cost
/// quadrature. Pure function of `(seed, context, sample)`.
pub fn cost_sample(
    spec: &ModelSpec,
    ops: &FemOperators,
    schedule: &ControlSchedule,
    n_steps: usize,
    seed: u64,
    context: u32,
    sample: u32,
) -> Result<f64> {
    if schedule.first_step != 0 || schedule.last_step() < n_steps {
        return Err(Error::InvalidConfig(
            "cost estimation needs a full-horizon schedule".into(),
        ));
    }
    let stream = StreamId::cost_sample(context, sample);
    let mut init_rng = block_rng(seed, stream, INIT_STEP);
    let mut x = spec.initial.sample(&mut init_rng);
    let dt = ops.dt();
    let sd = math::sqrt(dt);
    let mut dw = vec![0.0; spec.n_w()];
    let mut db = vec![0.0; spec.obs_dim()];
    let mut cost = 0.0;
    for k in 0..n_steps {
        let u_k = schedule.field_at(k);
        cost += dt * spec.running_cost(&x, u_k, ops)?;
        let mut rng = block_rng(seed, stream, k as u64);
        fill_normal(&mut rng, &mut dw, sd);
        fill_normal(&mut rng, &mut db, sd);
        x = step_truth(&x, u_k, &dw, &db, spec, ops, k)?;
    }
    cost += spec.terminal_cost(&x, ops)?;
    Ok(cost)
}

/// Monte-Carlo estimate of the cost of a schedule: mean and standard error
/// over `n_samples` independent simulations.
pub fn estimate_cost(
    spec: &ModelSpec,
    ops: &FemOperators,
    schedule: &ControlSchedule,
    n_steps: usize,
    n_samples: usize,
    seed: u64,
    context: u32,
) -> Result<(f64, f64)> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be >= 1".into()));
    }
    let mut values = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        values.push(cost_sample(spec, ops, schedule, n_steps, seed, context, i as u32)?);
    }
    Ok(mean_stderr(&values))
}

/// Sample mean and standard error, summed in index order for determinism.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, math::sqrt(var / n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostPoint {
    pub outer: usize,
    pub t: f64,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdPoint {
    pub outer: usize,
    pub iter: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterPoint {
    pub t: f64,
    pub ess: f64,
    /// Posterior mean of the squared L2 norm.
    pub post_sq_norm: f64,
    /// Posterior mean of the first-mode coefficient.
    pub post_mode1: f64,
    pub w_min: f64,
    pub w_max: f64,
}

/// Everything a run produces; enough to replay, plot and regression-diff.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub seed: u64,
    pub cost_trace: Vec<CostPoint>,
    pub sgd_trace: Vec<SgdPoint>,
    pub filter_trace: Vec<FilterPoint>,
    pub schedule: ControlSchedule,
    /// Truth trajectory, one field per time node.
    pub truth: Vec<Field>,
    pub observations: ObservationPath,
    /// Pathwise cost realized by the synthetic truth under the schedule.
    pub realized_cost: f64,
    /// Monte-Carlo estimate (mean, stderr) under the final schedule.
    pub final_cost: (f64, f64),
}

/// Progress snapshot delivered after each branching interval.
#[derive(Debug, Clone, Copy)]
pub struct OuterProgress {
    pub outer: usize,
    pub n_outer: usize,
    pub t: f64,
    pub cost_mean: f64,
    pub cost_stderr: f64,
    pub ess: f64,
}

/// The full receding-horizon loop: optimize the tail schedule at each
/// branching node, freeze the node's control, advance truth + observations
/// one interval, reweight and branch the cloud.
pub fn run_algorithm1(
    spec: &ModelSpec,
    ops: &FemOperators,
    cfg: &SolverConfig,
    truth_noise: &dyn TruthNoise,
    mut progress: impl FnMut(&OuterProgress),
) -> Result<RunReport> {
    cfg.validate()?;
    spec.validate(ops)?;
    let n_steps = cfg.n_steps;
    let n_outer = cfg.n_outer();
    let dt = ops.dt();
    let d = spec.obs_dim();
    let n_w = spec.n_w();
    let first_mode = crate::fem::sine_mode(ops.mesh(), 1);

    let mut schedule =
        ControlSchedule::zeros(ops.n_dof(), 0, n_steps + 1, cfg.alpha, cfg.lr_decay);
    for f in &mut schedule.fields {
        spec.project(f);
    }
    let mut truth_rng = block_rng(cfg.seed, StreamId::truth_state(), INIT_STEP);
    let mut truth_state = spec.initial.sample(&mut truth_rng);
    let mut truth_path = Vec::with_capacity(n_steps + 1);
    truth_path.push(truth_state.clone());
    let mut cloud = ParticleCloud::init(cfg.s_particles, &spec.initial, cfg.seed)?;

    let mut y_path = vec![vec![0.0; d]];
    let mut dy_rows: Vec<Vec<f64>> = Vec::with_capacity(n_steps);
    let mut realized = 0.0;
    let mut cost_trace = Vec::with_capacity(n_outer + 1);
    let mut sgd_trace = Vec::new();
    let mut filter_trace = Vec::with_capacity(n_outer);
    let mut dw = vec![0.0; n_w];
    let mut db = vec![0.0; d];

    if n_outer == 0 {
        inner_sgd(
            spec,
            ops,
            cfg,
            &cloud,
            &mut schedule,
            0,
            0,
            0,
            cfg.n_sgd,
            |it, gn| {
                sgd_trace.push(SgdPoint {
                    outer: 0,
                    iter: it,
                    grad_norm: gn,
                })
            },
        )?;
    }

    for outer in 0..n_outer {
        let n_f = outer * cfg.branch_every;
        inner_sgd(
            spec,
            ops,
            cfg,
            &cloud,
            &mut schedule,
            n_f,
            outer as u32,
            0,
            cfg.n_sgd,
            |it, gn| {
                sgd_trace.push(SgdPoint {
                    outer,
                    iter: it,
                    grad_norm: gn,
                })
            },
        )?;
        let (mean, stderr) = estimate_cost(
            spec,
            ops,
            &schedule,
            n_steps,
            cfg.n_cost_samples,
            cfg.seed,
            outer as u32,
        )?;
        cost_trace.push(CostPoint {
            outer,
            t: n_f as f64 * dt,
            mean,
            stderr,
        });

        // the interval's controls are now fixed; advance truth + filter
        for k in n_f..n_f + cfg.branch_every {
            let u_k = schedule.field_at(k).clone();
            truth_noise.fill_dw(k, &mut dw);
            truth_noise.fill_db(k, &mut db);
            let h = spec.observe(&truth_state, &u_k, ops)?;
            let dy: Vec<f64> = h
                .iter()
                .zip(&db)
                .map(|(hj, bj)| hj * dt + bj)
                .collect();
            realized += dt * spec.running_cost(&truth_state, &u_k, ops)?;
            truth_state = step_truth(&truth_state, &u_k, &dw, &db, spec, ops, k)?;
            truth_path.push(truth_state.clone());
            cloud.propagate_and_weight(&u_k, &dy, k, spec, ops, cfg.seed)?;
            let mut y_next = y_path.last().expect("nonempty").clone();
            for (yv, dyv) in y_next.iter_mut().zip(&dy) {
                *yv += dyv;
            }
            y_path.push(y_next);
            dy_rows.push(dy);
        }
        cloud.normalize();
        let weights = cloud.normalized_weights();
        let (mut w_min, mut w_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for &w in weights {
            w_min = w_min.min(w);
            w_max = w_max.max(w);
        }
        let ess = cloud.ess();
        filter_trace.push(FilterPoint {
            t: (n_f + cfg.branch_every) as f64 * dt,
            ess,
            post_sq_norm: cloud.posterior_expectation(|x| {
                ops.inner_product(x, x).expect("cloud on own mesh")
            }),
            post_mode1: cloud.posterior_expectation(|x| {
                ops.inner_product(x, &first_mode).expect("cloud on own mesh")
            }),
            w_min,
            w_max,
        });
        let mut branch_rng = block_rng(cfg.seed, StreamId::branch_event(outer as u32), INIT_STEP);
        cloud.branch(&mut branch_rng);
        progress(&OuterProgress {
            outer,
            n_outer,
            t: (n_f + cfg.branch_every) as f64 * dt,
            cost_mean: mean,
            cost_stderr: stderr,
            ess,
        });
    }

    realized += spec.terminal_cost(&truth_state, ops)?;
    let final_cost = estimate_cost(
        spec,
        ops,
        &schedule,
        n_steps,
        cfg.n_cost_samples,
        cfg.seed,
        n_outer as u32,
    )?;
    cost_trace.push(CostPoint {
        outer: n_outer,
        t: n_steps as f64 * dt,
        mean: final_cost.0,
        stderr: final_cost.1,
    });

    Ok(RunReport {
        seed: cfg.seed,
        cost_trace,
        sgd_trace,
        filter_trace,
        schedule,
        truth: truth_path,
        observations: ObservationPath {
            y: y_path,
            increments: dy_rows,
        },
        realized_cost: realized,
        final_cost,
    })
}
