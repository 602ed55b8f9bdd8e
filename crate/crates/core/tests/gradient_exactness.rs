//! The backward sweep must be the exact transpose of the discrete forward
//! map: with frozen noise and no observation coupling, the control gradient
//! has to match central finite differences of the simulated pathwise cost to
//! round-off, at any mesh and step size.

use spdec_core::adjoint::{backward_sweep, HxpMode};
use spdec_core::fem::{sine_mode, Field, FemOperators};
use spdec_core::model::{
    default_sensors, Drift, InitialLaw, ModelSpec, NoiseChannel, ObsLink, Observation,
    Projection, RunningCost, TerminalCost,
};
use spdec_core::noise::{block_rng, fill_normal, StreamId};

/// Fully nonlinear coefficients (state-dependent drift, noise amplitudes and
/// quartic terminal cost) but decoupled observations.
fn nonlinear_model(ops: &FemOperators, n_w: usize, d: usize) -> ModelSpec {
    let mesh = ops.mesh();
    let state_noise = (0..n_w)
        .map(|i| {
            let c = i as f64 * 0.7;
            NoiseChannel {
                amp: Box::new(move |x: f64| 0.08 + 0.04 * (x + c).sin()),
                amp_dx: Box::new(move |x: f64| 0.04 * (x + c).cos()),
                shape: sine_mode(mesh, i + 1),
            }
        })
        .collect();
    let obs_noise = (0..d)
        .map(|j| NoiseChannel {
            amp: Box::new(|x: f64| 0.05 * (x + 1.0)),
            amp_dx: Box::new(|_| 0.05),
            shape: sine_mode(mesh, j + 1),
        })
        .collect();
    ModelSpec {
        name: "nonlinear_pathwise".into(),
        drift: Drift {
            value: Box::new(|x, u| u * (1.0 + 0.2 * x.sin()) + 0.5 * x - 0.1 * x * x * x),
            dx: Box::new(|x, u| 0.2 * u * x.cos() + 0.5 - 0.3 * x * x),
            du: Box::new(|x, _| 1.0 + 0.2 * x.sin()),
        },
        state_noise,
        obs_noise,
        observation: Observation {
            sensors: default_sensors(ops, d, 0.5),
            link: ObsLink::Zero,
            with_control: false,
        },
        running: RunningCost {
            value: Box::new(|x, u| 0.5 * (x * x + u * u) + 0.2 * x * u),
            dx: Box::new(|x, u| x + 0.2 * u),
            du: Box::new(|x, u| u + 0.2 * x),
        },
        terminal: TerminalCost {
            value: Box::new(|x| 0.5 * x * x + 0.025 * x * x * x * x),
            dx: Box::new(|x| x + 0.1 * x * x * x),
        },
        projection: Projection::Identity,
        initial: InitialLaw::deterministic(Field::zeros(ops.n_dof())),
    }
}

fn random_field(n: usize, scale: f64, rng: &mut rand_chacha::ChaCha12Rng) -> Field {
    let mut f = Field::zeros(n);
    fill_normal(rng, f.values_mut(), scale);
    f
}

struct FrozenNoise {
    dw: Vec<Vec<f64>>,
    db: Vec<Vec<f64>>,
}

impl FrozenNoise {
    fn draw(n_steps: usize, n_w: usize, d: usize, dt: f64, seed: u64) -> Self {
        let sd = dt.sqrt();
        let mut dw = Vec::new();
        let mut db = Vec::new();
        for k in 0..n_steps {
            let mut rng = block_rng(seed, StreamId::custom(k as u64), 7);
            let mut a = vec![0.0; n_w];
            let mut b = vec![0.0; d];
            fill_normal(&mut rng, &mut a, sd);
            fill_normal(&mut rng, &mut b, sd);
            dw.push(a);
            db.push(b);
        }
        FrozenNoise { dw, db }
    }
}

fn pathwise_cost(
    x0: &Field,
    controls: &[Field],
    noise: &FrozenNoise,
    spec: &ModelSpec,
    ops: &FemOperators,
) -> f64 {
    let dt = ops.dt();
    let mut x = x0.clone();
    let mut cost = 0.0;
    for (k, u_k) in controls.iter().enumerate() {
        cost += dt * spec.running_cost(&x, u_k, ops).unwrap();
        x = spdec_core::forward::step_truth(&x, u_k, &noise.dw[k], &noise.db[k], spec, ops, k)
            .unwrap();
    }
    cost + spec.terminal_cost(&x, ops).unwrap()
}

#[test]
fn sweep_gradient_matches_frozen_noise_finite_differences() {
    let ops = FemOperators::assemble(4.0, 40, 0.02).unwrap();
    let n = ops.n_dof();
    let n_steps = 25;
    let (n_w, d) = (3usize, 2usize);
    let spec = nonlinear_model(&ops, n_w, d);
    let noise = FrozenNoise::draw(n_steps, n_w, d, ops.dt(), 99);
    let mut rng = block_rng(1, StreamId::custom(1000), 0);
    let x0 = random_field(n, 0.5, &mut rng);
    let controls: Vec<Field> = (0..n_steps).map(|_| random_field(n, 0.4, &mut rng)).collect();

    // forward pass with the frozen rows, then the backward sweep
    let mut states = vec![x0.clone()];
    for k in 0..n_steps {
        states.push(
            spdec_core::forward::step_truth(
                &states[k],
                &controls[k],
                &noise.dw[k],
                &noise.db[k],
                &spec,
                &ops,
                k,
            )
            .unwrap(),
        );
    }
    let sweep = backward_sweep(
        &states,
        &controls,
        &noise.dw,
        &noise.db,
        &spec,
        &ops,
        HxpMode::ScalarPairing,
    )
    .unwrap();
    assert_eq!(sweep.psi.len(), n_steps);
    // z0 bookkeeping: the scalar backward value at 0 is the realized cost
    let j0 = pathwise_cost(&x0, &controls, &noise, &spec, &ops);
    assert!((sweep.z0 - j0).abs() < 1e-12 * j0.abs().max(1.0));

    let eps = 1e-6;
    for dir_seed in 0..6u64 {
        let mut drng = block_rng(2, StreamId::custom(2000 + dir_seed), 0);
        let deltas: Vec<Field> = (0..n_steps).map(|_| random_field(n, 1.0, &mut drng)).collect();
        let mut pairing = 0.0;
        for (psi, delta) in sweep.psi.iter().zip(&deltas) {
            pairing += ops.dt() * ops.inner_product(psi, delta).unwrap();
        }
        let perturb = |sign: f64| -> f64 {
            let moved: Vec<Field> = controls
                .iter()
                .zip(&deltas)
                .map(|(u, delta)| {
                    let mut v = u.clone();
                    v.axpy(sign * eps, delta);
                    v
                })
                .collect();
            pathwise_cost(&x0, &moved, &noise, &spec, &ops)
        };
        let fd = (perturb(1.0) - perturb(-1.0)) / (2.0 * eps);
        let rel = (fd - pairing).abs() / fd.abs().max(1e-12);
        assert!(
            rel < 1e-7,
            "direction {dir_seed}: pairing {pairing} vs fd {fd} (rel {rel})"
        );
    }
}

#[test]
fn initial_state_duality_holds_with_noise() {
    // <p_0, dx0>_M equals the pathwise derivative of the cost with respect
    // to the initial state, frozen noise, nonlinear coefficients.
    let ops = FemOperators::assemble(4.0, 32, 0.02).unwrap();
    let n = ops.n_dof();
    let n_steps = 20;
    let (n_w, d) = (3usize, 2usize);
    let spec = nonlinear_model(&ops, n_w, d);
    let noise = FrozenNoise::draw(n_steps, n_w, d, ops.dt(), 5);
    let mut rng = block_rng(8, StreamId::custom(3000), 0);
    let x0 = random_field(n, 0.5, &mut rng);
    let controls: Vec<Field> = (0..n_steps).map(|_| random_field(n, 0.3, &mut rng)).collect();

    let mut states = vec![x0.clone()];
    for k in 0..n_steps {
        states.push(
            spdec_core::forward::step_truth(
                &states[k],
                &controls[k],
                &noise.dw[k],
                &noise.db[k],
                &spec,
                &ops,
                k,
            )
            .unwrap(),
        );
    }
    let z2 = vec![vec![0.0; d]; n_steps];
    let path = spdec_core::adjoint::solve_bspde_p(
        &states,
        &controls,
        &z2,
        &noise.dw,
        &noise.db,
        &spec,
        &ops,
        HxpMode::ScalarPairing,
        false,
    )
    .unwrap();

    let eps = 1e-6;
    for dir_seed in 0..4u64 {
        let mut drng = block_rng(9, StreamId::custom(4000 + dir_seed), 0);
        let delta = random_field(n, 1.0, &mut drng);
        let mut xp = x0.clone();
        xp.axpy(eps, &delta);
        let mut xm = x0.clone();
        xm.axpy(-eps, &delta);
        let fd = (pathwise_cost(&xp, &controls, &noise, &spec, &ops)
            - pathwise_cost(&xm, &controls, &noise, &spec, &ops))
            / (2.0 * eps);
        let pairing = ops.inner_product(&path.p[0], &delta).unwrap();
        let rel = (fd - pairing).abs() / fd.abs().max(1e-12);
        assert!(rel < 1e-7, "dir {dir_seed}: {pairing} vs {fd} (rel {rel})");
    }
}

#[test]
fn simulated_y_rollout_gradient_is_exact_without_observation_coupling() {
    // Mode-B dynamics (correction drift + dY-driven channels) reduce to a
    // pathwise-differentiable map when h == 0; the sweep must stay exact.
    let ops = FemOperators::assemble(4.0, 28, 0.025).unwrap();
    let n = ops.n_dof();
    let n_steps = 16;
    let (n_w, d) = (2usize, 2usize);
    let spec = nonlinear_model(&ops, n_w, d);
    let noise = FrozenNoise::draw(n_steps, n_w, d, ops.dt(), 31);
    let mut rng = block_rng(4, StreamId::custom(5000), 0);
    let x0 = random_field(n, 0.4, &mut rng);
    let controls: Vec<Field> = (0..n_steps).map(|_| random_field(n, 0.3, &mut rng)).collect();

    let run = |ctrl: &[Field]| -> (Vec<Field>, f64) {
        let dt = ops.dt();
        let mut x = x0.clone();
        let mut cost = 0.0;
        let mut states = vec![x.clone()];
        for k in 0..n_steps {
            cost += dt * spec.running_cost(&x, &ctrl[k], &ops).unwrap();
            // h == 0 so dy rows act purely as channel increments
            x = spdec_core::forward::step_particle(
                &x,
                &ctrl[k],
                &noise.dw[k],
                &noise.db[k],
                &spec,
                &ops,
                k,
            )
            .unwrap();
            states.push(x.clone());
        }
        cost += spec.terminal_cost(&x, &ops).unwrap();
        (states, cost)
    };

    let (states, _) = run(&controls);
    let sweep = backward_sweep(
        &states,
        &controls,
        &noise.dw,
        &noise.db,
        &spec,
        &ops,
        HxpMode::ScalarPairing,
    )
    .unwrap();

    let eps = 1e-6;
    let mut drng = block_rng(6, StreamId::custom(6000), 0);
    let deltas: Vec<Field> = (0..n_steps).map(|_| random_field(n, 1.0, &mut drng)).collect();
    let mut pairing = 0.0;
    for (psi, delta) in sweep.psi.iter().zip(&deltas) {
        pairing += ops.dt() * ops.inner_product(psi, delta).unwrap();
    }
    let moved = |sign: f64| -> f64 {
        let ctrl: Vec<Field> = controls
            .iter()
            .zip(&deltas)
            .map(|(u, delta)| {
                let mut v = u.clone();
                v.axpy(sign * eps, delta);
                v
            })
            .collect();
        run(&ctrl).1
    };
    let fd = (moved(1.0) - moved(-1.0)) / (2.0 * eps);
    let rel = (fd - pairing).abs() / fd.abs().max(1e-12);
    assert!(rel < 1e-7, "pairing {pairing} vs fd {fd} (rel {rel})");
}
