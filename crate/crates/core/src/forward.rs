//! Semi-implicit Euler stepping of the state equation.
//!
//! The Laplacian is treated implicitly, every reaction and noise term
//! explicitly at the left endpoint:
//!
//! ```text
//! (M + dt A) x_{k+1} = M [ x_k + dt b(x_k, u_k)
//!                          + sum_i sigma^i(x_k) shape_i dW^i_k
//!                          + sum_j g^j(x_k) shape_j dZ^j_k
//!                          - dt sum_j g^j(x_k) shape_j h^j(x_k, u_k) ]   (particle form only)
//! ```
//!
//! where `dZ` is the plain observation noise `dB` for the truth dynamics and
//! the observed increment `dY` for the particle dynamics. Substituting
//! `dY = h dt + dB` into the particle form cancels the correction drift
//! exactly, so both guises produce the same state on consistent inputs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fem::{Field, FemOperators};
use crate::noise::accumulate_channels;
use crate::model::ModelSpec;

/// One forward trajectory on the fine grid: `states[i]` is the state at step
/// `first_step + i`.
#[derive(Debug, Clone)]
pub struct StatePath {
    pub first_step: usize,
    pub states: Vec<Field>,
}

impl StatePath {
    pub fn last(&self) -> &Field {
        self.states.last().expect("non-empty path")
    }

    pub fn n_steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }
}

/// Observation path `Y` with `Y[0] = 0` and its increments.
#[derive(Debug, Clone)]
pub struct ObservationPath {
    pub y: Vec<Vec<f64>>,
    pub increments: Vec<Vec<f64>>,
}

fn check_step_inputs(
    x: &Field,
    u: &Field,
    dw_row: &[f64],
    obs_row: &[f64],
    spec: &ModelSpec,
    ops: &FemOperators,
) -> Result<()> {
    let n = ops.n_dof();
    for len in [x.len(), u.len()] {
        if len != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                got: len,
            });
        }
    }
    if dw_row.len() != spec.state_noise.len() {
        return Err(Error::ShapeMismatch {
            expected: spec.state_noise.len(),
            got: dw_row.len(),
        });
    }
    if obs_row.len() != spec.obs_noise.len() {
        return Err(Error::ShapeMismatch {
            expected: spec.obs_noise.len(),
            got: obs_row.len(),
        });
    }
    Ok(())
}

fn advance(
    x: &Field,
    u: &Field,
    dw_row: &[f64],
    obs_row: &[f64],
    correction: Option<&[f64]>,
    spec: &ModelSpec,
    ops: &FemOperators,
    step_index: usize,
    context: &'static str,
) -> Result<Field> {
    let n = ops.n_dof();
    let dt = ops.dt();
    let xv = x.values();
    let uv = u.values();
    let mut r = vec![0.0; n];
    for i in 0..n {
        r[i] = xv[i] + dt * (spec.drift.value)(xv[i], uv[i]);
    }
    accumulate_channels(&spec.state_noise, xv, dw_row, &mut r);
    accumulate_channels(&spec.obs_noise, xv, obs_row, &mut r);
    if let Some(h) = correction {
        // -dt g^j(x) h^j(x, u): reuse the channel accumulation with scaled h
        let scaled: Vec<f64> = h.iter().map(|hj| -dt * hj).collect();
        accumulate_channels(&spec.obs_noise, xv, &scaled, &mut r);
    }
    let mut rhs = vec![0.0; n];
    ops.mass_matvec_into(&r, &mut rhs);
    let mut out = vec![0.0; n];
    ops.solve_implicit_into(&rhs, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::BlowUp {
            step: step_index,
            context,
        });
    }
    Ok(Field::new(out).expect("checked finite"))
}

/// Advance the truth dynamics one step under the reference measure.
pub fn step_truth(
    x: &Field,
    u: &Field,
    dw_row: &[f64],
    db_row: &[f64],
    spec: &ModelSpec,
    ops: &FemOperators,
    step_index: usize,
) -> Result<Field> {
    check_step_inputs(x, u, dw_row, db_row, spec, ops)?;
    advance(x, u, dw_row, db_row, None, spec, ops, step_index, "truth step")
}

/// Advance the particle dynamics one step, driven by the observed increment
/// `dy_row` with the compensating `-g h` drift.
pub fn step_particle(
    x: &Field,
    u: &Field,
    dw_row: &[f64],
    dy_row: &[f64],
    spec: &ModelSpec,
    ops: &FemOperators,
    step_index: usize,
) -> Result<Field> {
    check_step_inputs(x, u, dw_row, dy_row, spec, ops)?;
    let h = spec.observe(x, u, ops)?;
    advance(
        x,
        u,
        dw_row,
        dy_row,
        Some(&h),
        spec,
        ops,
        step_index,
        "particle step",
    )
}

/// `step_particle` for callers that already evaluated `h(x, u)`.
pub fn step_particle_with_h(
    x: &Field,
    u: &Field,
    dw_row: &[f64],
    dy_row: &[f64],
    h: &[f64],
    spec: &ModelSpec,
    ops: &FemOperators,
    step_index: usize,
) -> Result<Field> {
    check_step_inputs(x, u, dw_row, dy_row, spec, ops)?;
    advance(
        x,
        u,
        dw_row,
        dy_row,
        Some(h),
        spec,
        ops,
        step_index,
        "particle step",
    )
}

/// Simulate the truth dynamics over `controls.len()` steps starting at
/// `x0`; increment rows come from the caller.
pub fn simulate_truth(
    x0: Field,
    controls: &[Field],
    dw_rows: &[Vec<f64>],
    db_rows: &[Vec<f64>],
    spec: &ModelSpec,
    ops: &FemOperators,
    first_step: usize,
) -> Result<StatePath> {
    let n_steps = controls.len();
    if dw_rows.len() != n_steps || db_rows.len() != n_steps {
        return Err(Error::ShapeMismatch {
            expected: n_steps,
            got: dw_rows.len().min(db_rows.len()),
        });
    }
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(x0);
    for k in 0..n_steps {
        let next = step_truth(
            &states[k],
            &controls[k],
            &dw_rows[k],
            &db_rows[k],
            spec,
            ops,
            first_step + k,
        )?;
        states.push(next);
    }
    Ok(StatePath { first_step, states })
}

/// Build the observation path for a simulated truth trajectory:
/// `dY_k = h(x_k, u_k) dt + dB_k`, `Y_0 = 0`.
pub fn synthesize_observation(
    truth: &StatePath,
    controls: &[Field],
    db_rows: &[Vec<f64>],
    spec: &ModelSpec,
    ops: &FemOperators,
) -> Result<ObservationPath> {
    let n_steps = truth.n_steps();
    if controls.len() < n_steps || db_rows.len() != n_steps {
        return Err(Error::ShapeMismatch {
            expected: n_steps,
            got: controls.len().min(db_rows.len()),
        });
    }
    let d = spec.obs_dim();
    let dt = ops.dt();
    let mut y = Vec::with_capacity(n_steps + 1);
    let mut increments = Vec::with_capacity(n_steps);
    y.push(vec![0.0; d]);
    for k in 0..n_steps {
        let h = spec.observe(&truth.states[k], &controls[k], ops)?;
        let mut dy = vec![0.0; d];
        let mut next = y[k].clone();
        for j in 0..d {
            dy[j] = h[j] * dt + db_rows[k][j];
            next[j] += dy[j];
        }
        increments.push(dy);
        y.push(next);
    }
    Ok(ObservationPath { y, increments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::sine_mode;
    use crate::math;
    use crate::model::{HeatBenchmark, LinearGaussian};
    use crate::noise::{block_rng, fill_normal, StreamId};
    use approx::assert_relative_eq;

    fn zero_rows(n: usize, width: usize) -> Vec<Vec<f64>> {
        vec![vec![0.0; width]; n]
    }

    #[test]
    fn zero_everything_stays_zero() {
        let ops = FemOperators::assemble(10.0, 50, 0.01).unwrap();
        let spec = HeatBenchmark {
            n_w: 4,
            d: 2,
            ..Default::default()
        }
        .build(&ops);
        let zero = Field::zeros(ops.n_dof());
        let next = step_truth(&zero, &zero, &[0.0; 4], &[0.0; 2], &spec, &ops, 0).unwrap();
        assert_eq!(next, zero);
    }

    #[test]
    fn noiseless_sine_mode_decays_at_heat_rate() {
        let l = 10.0;
        let dt = 1e-3;
        let ops = FemOperators::assemble(l, 256, dt).unwrap();
        let spec = LinearGaussian {
            n_w: 2,
            d: 2,
            sigma_amp: 0.0,
            ..Default::default()
        }
        .build(&ops);
        let x0 = ops
            .mesh()
            .interpolate(|lam| math::sin(core::f64::consts::PI * lam / l));
        let zero_u = Field::zeros(ops.n_dof());
        let mut x = x0.clone();
        // single step: drift b(x, 0) = 0 for the preset, pure heat decay
        x = step_truth(&x, &zero_u, &[0.0; 2], &[0.0; 2], &spec, &ops, 0).unwrap();
        let rate = (core::f64::consts::PI / l).powi(2);
        let expect = math::exp(-rate * dt);
        let got = ops.norm(&x).unwrap() / ops.norm(&x0).unwrap();
        assert_relative_eq!(got, expect, epsilon = 1e-6);
    }

    #[test]
    fn girsanov_drift_identity() {
        // step_particle(x, u, dW, h dt + dB) == step_truth(x, u, dW, dB)
        let ops = FemOperators::assemble(10.0, 80, 0.01).unwrap();
        let spec = HeatBenchmark {
            n_w: 6,
            d: 3,
            ..Default::default()
        }
        .build(&ops);
        let dt = ops.dt();
        for trial in 0..1000u64 {
            let mut rng = block_rng(17, StreamId::custom(trial), 0);
            let mut x = Field::zeros(ops.n_dof());
            let mut u = Field::zeros(ops.n_dof());
            fill_normal(&mut rng, x.values_mut(), 0.8);
            fill_normal(&mut rng, u.values_mut(), 0.5);
            let mut dw = [0.0; 6];
            let mut db = [0.0; 3];
            fill_normal(&mut rng, &mut dw, math::sqrt(dt));
            fill_normal(&mut rng, &mut db, math::sqrt(dt));
            let h = spec.observe(&x, &u, &ops).unwrap();
            let dy: Vec<f64> = h.iter().zip(&db).map(|(hj, bj)| hj * dt + bj).collect();
            let via_truth = step_truth(&x, &u, &dw, &db, &spec, &ops, 0).unwrap();
            let via_particle = step_particle(&x, &u, &dw, &dy, &spec, &ops, 0).unwrap();
            for (a, b) in via_truth.values().iter().zip(via_particle.values()) {
                assert!(
                    (a - b).abs() <= 1e-12 * a.abs().max(1.0),
                    "trial {trial}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn particle_step_without_g_equals_truth_without_db() {
        let ops = FemOperators::assemble(10.0, 40, 0.01).unwrap();
        let spec = LinearGaussian {
            n_w: 3,
            d: 2,
            ..Default::default()
        }
        .build(&ops); // g == 0 in this preset
        let mut rng = block_rng(3, StreamId::custom(0), 0);
        let mut x = Field::zeros(ops.n_dof());
        fill_normal(&mut rng, x.values_mut(), 1.0);
        let u = Field::zeros(ops.n_dof());
        let mut dw = [0.0; 3];
        fill_normal(&mut rng, &mut dw, 0.1);
        let dy = [0.4, -0.2];
        let a = step_particle(&x, &u, &dw, &dy, &spec, &ops, 0).unwrap();
        let b = step_truth(&x, &u, &dw, &[0.0, 0.0], &spec, &ops, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn observation_synthesis_trivial_cases() {
        let ops = FemOperators::assemble(10.0, 30, 0.05).unwrap();
        let spec = HeatBenchmark {
            n_w: 2,
            d: 2,
            ..Default::default()
        }
        .build(&ops);
        let n_steps = 10;
        let zero_u: Vec<Field> = (0..n_steps).map(|_| Field::zeros(ops.n_dof())).collect();
        let dw = zero_rows(n_steps, 2);
        let db = zero_rows(n_steps, 2);
        let truth = simulate_truth(
            Field::zeros(ops.n_dof()),
            &zero_u,
            &dw,
            &db,
            &spec,
            &ops,
            0,
        )
        .unwrap();
        // h(0,0) = 0 and dB = 0: Y stays zero
        let obs = synthesize_observation(&truth, &zero_u, &db, &spec, &ops).unwrap();
        assert_eq!(obs.y[0], vec![0.0; 2]);
        assert_eq!(obs.y[n_steps], vec![0.0; 2]);

        // constant h (frozen state), dB = 0: Y_k = h * k dt exactly
        let x0 = sine_mode(ops.mesh(), 1);
        let h0 = spec.observe(&x0, &zero_u[0], &ops).unwrap();
        let frozen = StatePath {
            first_step: 0,
            states: vec![x0.clone(); n_steps + 1],
        };
        let obs = synthesize_observation(&frozen, &zero_u, &db, &spec, &ops).unwrap();
        for j in 0..2 {
            assert_relative_eq!(
                obs.y[n_steps][j],
                h0[j] * ops.dt() * n_steps as f64,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn observation_increments_respect_bounded_drift() {
        let ops = FemOperators::assemble(10.0, 60, 0.01).unwrap();
        let spec = HeatBenchmark {
            n_w: 8,
            d: 5,
            ..Default::default()
        }
        .build(&ops);
        let n_steps = 50;
        let controls: Vec<Field> = (0..n_steps).map(|_| Field::zeros(ops.n_dof())).collect();
        let mut dw = zero_rows(n_steps, 8);
        let mut db = zero_rows(n_steps, 5);
        for k in 0..n_steps {
            let mut rng = block_rng(11, StreamId::custom(100 + k as u64), 0);
            fill_normal(&mut rng, &mut dw[k], math::sqrt(ops.dt()));
            fill_normal(&mut rng, &mut db[k], math::sqrt(ops.dt()));
        }
        let x0 = ops
            .mesh()
            .interpolate(|lam| math::sin(core::f64::consts::PI * lam / 10.0));
        let truth = simulate_truth(x0, &controls, &dw, &db, &spec, &ops, 0).unwrap();
        let obs = synthesize_observation(&truth, &controls, &db, &spec, &ops).unwrap();
        let bound = core::f64::consts::FRAC_PI_2 * ops.dt();
        for k in 0..n_steps {
            for j in 0..5 {
                assert!(obs.increments[k][j].abs() <= bound + db[k][j].abs() + 1e-15);
            }
        }
    }

    #[test]
    fn benchmark_stays_finite_across_dt_ladder() {
        for &(n_steps, dt) in &[(10usize, 0.1), (100, 0.01), (1000, 0.001)] {
            let ops = FemOperators::assemble(10.0, 100, dt).unwrap();
            let spec = HeatBenchmark {
                n_w: 10,
                d: 3,
                ..Default::default()
            }
            .build(&ops);
            for seed in 0..100u64 {
                let path = crate::noise::NoisePath::sample(
                    seed,
                    StreamId::custom(seed),
                    n_steps,
                    10,
                    3,
                    dt,
                )
                .unwrap();
                let mut x = spec.initial.mean.clone();
                let u = Field::zeros(ops.n_dof());
                for k in 0..n_steps {
                    x = step_truth(&x, &u, path.dw_row(k), path.db_row(k), &spec, &ops, k)
                        .unwrap();
                }
                assert!(x.is_finite());
            }
        }
    }
}
