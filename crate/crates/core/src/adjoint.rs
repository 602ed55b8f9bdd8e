//! Backward solvers along a single forward realization: the scalar BSDE for
//! `(z, z1, z2)` and the field-valued BSPDE for `(p, q1, q2)`.
//!
//! Conditional expectations are replaced by single-sample martingale-increment
//! estimators built from the same increments that drove the forward pass:
//! `z2^j_k = z_{k+1} dB^j_k / dt` and `q2^j_k = zeta_{k+1} dB^j_k / dt`, where
//! `zeta_{k+1}` is the implicit-solve propagation of the adjoint state.
//!
//! The recursion is organized as the exact transpose of the discrete forward
//! map rather than a discretization of the continuous adjoint equation: the
//! backward pass carries the Euclidean gradient covector `v_k` of the
//! pathwise discrete cost and converts to Riesz representers (`p = M^{-1} v`)
//! at the interface. For paths without observation coupling this makes the
//! control gradient match finite differences of the simulated cost to
//! round-off, at any resolution.

use alloc::vec;
use alloc::vec::Vec;

use crate::control::gradient_field;
use crate::error::{Error, Result};
use crate::fem::{Field, FemOperators};
use crate::model::ModelSpec;

/// Composition rule for the observation-coupling term `g^j h_x^j p` of the
/// adjoint drift, whose operator order the continuous formulation leaves
/// ambiguous (`h_x^j` is a functional with representer `r_j`, `g^j` a
/// pointwise field).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HxpMode {
    /// `g^j(x)(.) <r_j, p>`: pointwise field times the scalar pairing.
    #[default]
    ScalarPairing,
    /// `g^j(x)(.) r_j(.) p(.)`: fully pointwise product.
    Pointwise,
    /// `r_j(.) <g^j(x), p>`: the transpose placement, i.e. the adjoint of
    /// the forward linearization of the `g h` correction drift.
    AdjointPairing,
}

/// Solution of the scalar backward equation over steps `first..=N`.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    /// `z[k]`, one entry per time node (length `n_steps + 1`).
    pub z: Vec<f64>,
    /// Cylindrical-channel integrands per step (length `n_steps`).
    pub z1: Vec<Vec<f64>>,
    /// Observation-channel integrands per step (length `n_steps`).
    pub z2: Vec<Vec<f64>>,
}

/// Solution of the field-valued backward equation.
#[derive(Debug, Clone)]
pub struct AdjointPath {
    /// Riesz representers `p_k = M^{-1} v_k`, one per time node.
    pub p: Vec<Field>,
    /// `zeta[k] = (M + dt A)^{-1} v_{k+1}`: the propagated adjoint state
    /// paired with step `k` by the gradient formula (length `n_steps`).
    pub zeta: Vec<Field>,
    /// Cylindrical integrands; allocated only when some state-noise channel
    /// has a state-dependent amplitude.
    pub q1: Option<Vec<Vec<Field>>>,
    /// Observation-channel integrands (length `n_steps`, `d` fields each).
    pub q2: Option<Vec<Vec<Field>>>,
}

fn check_path_lens(
    states: &[Field],
    controls: &[Field],
    dw_rows: &[Vec<f64>],
    res_rows: &[Vec<f64>],
) -> Result<usize> {
    if states.is_empty() {
        return Err(Error::InvalidConfig("empty state path".into()));
    }
    let n_steps = states.len() - 1;
    if controls.len() < n_steps || dw_rows.len() != n_steps || res_rows.len() != n_steps {
        return Err(Error::ShapeMismatch {
            expected: n_steps,
            got: controls.len().min(dw_rows.len()).min(res_rows.len()),
        });
    }
    Ok(n_steps)
}

/// Terminal covector `w .* m_x(x_N)`: the Euclidean gradient of the terminal
/// quadrature. Its representer `M^{-1} v_N` is the discrete-L2 gradient of
/// the terminal cost.
fn terminal_covector(x_last: &Field, spec: &ModelSpec, ops: &FemOperators) -> Vec<f64> {
    ops.quad_weights()
        .iter()
        .zip(x_last.values())
        .map(|(&w, &xv)| w * (spec.terminal.dx)(xv))
        .collect()
}

/// Backward recursion for `(z, z1, z2)`:
/// `z_N` is the terminal-cost quadrature, then per step
/// `z2^j_k = z_{k+1} res^j_k / dt`, `z1^i_k = z_{k+1} dW^i_k / dt`,
/// `z_k = z_{k+1} + dt L(x_k, u_k)`.
pub fn solve_bsde_z(
    states: &[Field],
    controls: &[Field],
    dw_rows: &[Vec<f64>],
    res_rows: &[Vec<f64>],
    spec: &ModelSpec,
    ops: &FemOperators,
) -> Result<BsdeSolution> {
    let n_steps = check_path_lens(states, controls, dw_rows, res_rows)?;
    let dt = ops.dt();
    let mut z = vec![0.0; n_steps + 1];
    let mut z1 = vec![Vec::new(); n_steps];
    let mut z2 = vec![Vec::new(); n_steps];
    z[n_steps] = spec.terminal_cost(&states[n_steps], ops)?;
    for k in (0..n_steps).rev() {
        let z_next = z[k + 1];
        z1[k] = dw_rows[k].iter().map(|&dw| z_next * dw / dt).collect();
        z2[k] = res_rows[k].iter().map(|&db| z_next * db / dt).collect();
        z[k] = z_next + dt * spec.running_cost(&states[k], &controls[k], ops)?;
    }
    Ok(BsdeSolution { z, z1, z2 })
}

/// Which noise channels need their state-derivative coupling computed.
struct ChannelActivity {
    state: Vec<bool>,
    obs: Vec<bool>,
    any_state: bool,
}

impl ChannelActivity {
    fn probe(spec: &ModelSpec) -> Self {
        let state: Vec<bool> = spec.state_noise.iter().map(|c| !c.is_additive()).collect();
        let obs = spec.obs_noise.iter().map(|c| !c.is_additive()).collect();
        let any_state = state.iter().any(|&b| b);
        ChannelActivity {
            state,
            obs,
            any_state,
        }
    }

    #[cfg(test)]
    fn all_active(spec: &ModelSpec) -> Self {
        ChannelActivity {
            state: vec![true; spec.state_noise.len()],
            obs: vec![true; spec.obs_noise.len()],
            any_state: true,
        }
    }
}

/// One backward step of the field equation: consumes `v_{k+1}` (covector)
/// and writes `v_k`, the propagated representer `zeta_{k+1}` and its
/// covector `kappa = M zeta`.
#[allow(clippy::too_many_arguments)]
fn bspde_step(
    x: &Field,
    u: &Field,
    dw_row: &[f64],
    res_row: &[f64],
    z2_row: &[f64],
    v_next: &[f64],
    spec: &ModelSpec,
    ops: &FemOperators,
    hxp: HxpMode,
    activity: &ChannelActivity,
    zeta: &mut [f64],
    kappa: &mut [f64],
    out_v: &mut [f64],
    step_index: usize,
) -> Result<()> {
    let n = ops.n_dof();
    let dt = ops.dt();
    let xv = x.values();
    let uv = u.values();
    let w = ops.quad_weights();

    // propagate through the transposed implicit step
    ops.solve_implicit_into(v_next, zeta);
    ops.mass_matvec_into(zeta, kappa);

    // pass-through, running-cost source and drift linearization
    for i in 0..n {
        out_v[i] = kappa[i]
            + dt * w[i] * (spec.running.dx)(xv[i], uv[i])
            + dt * (spec.drift.dx)(xv[i], uv[i]) * kappa[i];
    }
    // state-noise linearization: sum_i sigma_x^i shape_i dW^i .* kappa
    // (the truncated series pairing with the q1 integrands)
    for ((ch, &active), &dwi) in spec
        .state_noise
        .iter()
        .zip(&activity.state)
        .zip(dw_row)
    {
        if !active || dwi == 0.0 {
            continue;
        }
        let shape = ch.shape.values();
        for i in 0..n {
            out_v[i] += (ch.amp_dx)(xv[i]) * shape[i] * dwi * kappa[i];
        }
    }
    // observation-noise linearization: sum_j g_x^j shape_j res^j .* kappa
    // (pairs with the q2 integrands)
    for ((ch, &active), &rj) in spec.obs_noise.iter().zip(&activity.obs).zip(res_row) {
        if !active || rj == 0.0 {
            continue;
        }
        let shape = ch.shape.values();
        for i in 0..n {
            out_v[i] += (ch.amp_dx)(xv[i]) * shape[i] * rj * kappa[i];
        }
    }

    // observation couplings enter as L2 elements and are mapped to covector
    // form by one mass matvec:
    //   + sum_j z2^j r_j          (information coupling, h_x^* z2)
    //   - sum_j (g^j h_x^j p)     (composition per HxpMode)
    if !matches!(spec.observation.link, crate::model::ObsLink::Zero) {
        let grad = spec.observation_gradient(x, u, ops)?;
        let mut l2elem = vec![0.0; n];
        for (j, rep) in grad.dx.iter().enumerate() {
            if z2_row[j] != 0.0 {
                let rv = rep.values();
                for i in 0..n {
                    l2elem[i] += z2_row[j] * rv[i];
                }
            }
            let ch = &spec.obs_noise[j];
            let shape = ch.shape.values();
            let rv = rep.values();
            match hxp {
                HxpMode::ScalarPairing => {
                    // <r_j, zeta>_M = r_j . kappa
                    let c: f64 = rv.iter().zip(kappa.iter()).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        l2elem[i] -= c * (ch.amp)(xv[i]) * shape[i];
                    }
                }
                HxpMode::Pointwise => {
                    for i in 0..n {
                        l2elem[i] -= (ch.amp)(xv[i]) * shape[i] * rv[i] * zeta[i];
                    }
                }
                HxpMode::AdjointPairing => {
                    let c: f64 = (0..n).map(|i| (ch.amp)(xv[i]) * shape[i] * kappa[i]).sum();
                    for i in 0..n {
                        l2elem[i] -= c * rv[i];
                    }
                }
            }
        }
        let mut ml2 = vec![0.0; n];
        ops.mass_matvec_into(&l2elem, &mut ml2);
        for i in 0..n {
            out_v[i] += dt * ml2[i];
        }
    }

    if out_v.iter().any(|v| !v.is_finite()) {
        return Err(Error::BlowUp {
            step: step_index,
            context: "backward step",
        });
    }
    Ok(())
}

/// Backward solve of the field equation along one realization, with `z2`
/// already computed by [`solve_bsde_z`].
#[allow(clippy::too_many_arguments)]
pub fn solve_bspde_p(
    states: &[Field],
    controls: &[Field],
    z2_rows: &[Vec<f64>],
    dw_rows: &[Vec<f64>],
    res_rows: &[Vec<f64>],
    spec: &ModelSpec,
    ops: &FemOperators,
    hxp: HxpMode,
    keep_integrands: bool,
) -> Result<AdjointPath> {
    let activity = ChannelActivity::probe(spec);
    solve_bspde_p_inner(
        states,
        controls,
        z2_rows,
        dw_rows,
        res_rows,
        spec,
        ops,
        hxp,
        keep_integrands,
        &activity,
    )
}

#[allow(clippy::too_many_arguments)]
fn solve_bspde_p_inner(
    states: &[Field],
    controls: &[Field],
    z2_rows: &[Vec<f64>],
    dw_rows: &[Vec<f64>],
    res_rows: &[Vec<f64>],
    spec: &ModelSpec,
    ops: &FemOperators,
    hxp: HxpMode,
    keep_integrands: bool,
    activity: &ChannelActivity,
) -> Result<AdjointPath> {
    let n_steps = check_path_lens(states, controls, dw_rows, res_rows)?;
    if z2_rows.len() != n_steps {
        return Err(Error::ShapeMismatch {
            expected: n_steps,
            got: z2_rows.len(),
        });
    }
    let n = ops.n_dof();
    let dt = ops.dt();
    let mut v = terminal_covector(&states[n_steps], spec, ops);
    let mut p_rev = Vec::with_capacity(n_steps + 1);
    p_rev.push(ops.mass_solve(&Field::new(v.clone())?)?);
    let mut zeta_rev: Vec<Field> = Vec::with_capacity(n_steps);
    let keep_q1 = keep_integrands && activity.any_state;
    let mut q1_rev: Vec<Vec<Field>> = Vec::new();
    let mut q2_rev: Vec<Vec<Field>> = Vec::new();
    let mut zeta = vec![0.0; n];
    let mut kappa = vec![0.0; n];
    let mut v_out = vec![0.0; n];
    for k in (0..n_steps).rev() {
        bspde_step(
            &states[k],
            &controls[k],
            &dw_rows[k],
            &res_rows[k],
            &z2_rows[k],
            &v,
            spec,
            ops,
            hxp,
            activity,
            &mut zeta,
            &mut kappa,
            &mut v_out,
            k,
        )?;
        let zeta_field = Field::new(zeta.clone())?;
        if keep_integrands {
            q2_rev.push(
                res_rows[k]
                    .iter()
                    .map(|&db| zeta_field.scaled(db / dt))
                    .collect(),
            );
            if keep_q1 {
                q1_rev.push(
                    dw_rows[k]
                        .iter()
                        .map(|&dw| zeta_field.scaled(dw / dt))
                        .collect(),
                );
            }
        }
        zeta_rev.push(zeta_field);
        core::mem::swap(&mut v, &mut v_out);
        p_rev.push(ops.mass_solve(&Field::new(v.clone())?)?);
    }
    p_rev.reverse();
    zeta_rev.reverse();
    q1_rev.reverse();
    q2_rev.reverse();
    Ok(AdjointPath {
        p: p_rev,
        zeta: zeta_rev,
        q1: if keep_q1 { Some(q1_rev) } else { None },
        q2: if keep_integrands { Some(q2_rev) } else { None },
    })
}

/// Result of the fused backward pass used by the SGD loop: the control
/// gradient at every step plus the scalar backward values.
#[derive(Debug, Clone)]
pub struct SweepResult {
    /// Gradient representer per step (length `n_steps`).
    pub psi: Vec<Field>,
    /// Value of the scalar backward equation at the first step.
    pub z0: f64,
}

/// Fused single pass: scalar backward values, field backward values and the
/// per-step control gradient, without materializing the whole adjoint path.
pub fn backward_sweep(
    states: &[Field],
    controls: &[Field],
    dw_rows: &[Vec<f64>],
    res_rows: &[Vec<f64>],
    spec: &ModelSpec,
    ops: &FemOperators,
    hxp: HxpMode,
) -> Result<SweepResult> {
    let n_steps = check_path_lens(states, controls, dw_rows, res_rows)?;
    let n = ops.n_dof();
    let dt = ops.dt();
    let activity = ChannelActivity::probe(spec);
    let mut v = terminal_covector(&states[n_steps], spec, ops);
    let mut z = spec.terminal_cost(&states[n_steps], ops)?;
    let mut psi_rev: Vec<Field> = Vec::with_capacity(n_steps);
    let mut zeta = vec![0.0; n];
    let mut kappa = vec![0.0; n];
    let mut v_out = vec![0.0; n];
    let mut z2_row = vec![0.0; spec.obs_dim()];
    for k in (0..n_steps).rev() {
        for (z2, &db) in z2_row.iter_mut().zip(&res_rows[k]) {
            *z2 = z * db / dt;
        }
        bspde_step(
            &states[k],
            &controls[k],
            &dw_rows[k],
            &res_rows[k],
            &z2_row,
            &v,
            spec,
            ops,
            hxp,
            &activity,
            &mut zeta,
            &mut kappa,
            &mut v_out,
            k,
        )?;
        let zeta_field = Field::new(zeta.clone())?;
        psi_rev.push(gradient_field(
            spec,
            &states[k],
            &controls[k],
            &zeta_field,
            &z2_row,
            ops,
        )?);
        z += dt * spec.running_cost(&states[k], &controls[k], ops)?;
        core::mem::swap(&mut v, &mut v_out);
    }
    psi_rev.reverse();
    Ok(SweepResult {
        psi: psi_rev,
        z0: z,
    })
}

/// The Hamiltonian pairing of state, control and adjoint variables:
/// `<p, b> + sum_i <q1^i, sigma^i> + sum_j <q2^j, g^j> + L + sum_j z2^j h^j`,
/// all inner products in the discrete L2 metric. `z2_effective` is the
/// caller's choice of raw or shifted `z2`.
pub fn hamiltonian(
    spec: &ModelSpec,
    x: &Field,
    u: &Field,
    p: &Field,
    q1: Option<&[Field]>,
    q2: &[Field],
    z2_effective: &[f64],
    ops: &FemOperators,
) -> Result<f64> {
    let bfield = crate::model::apply_nemytskii(|xv, uv| (spec.drift.value)(xv, uv), x, u)?;
    let mut h = ops.inner_product(p, &bfield)?;
    if let Some(q1) = q1 {
        if q1.len() != spec.n_w() {
            return Err(Error::ShapeMismatch {
                expected: spec.n_w(),
                got: q1.len(),
            });
        }
        for (ch, q) in spec.state_noise.iter().zip(q1) {
            h += ops.inner_product(q, &ch.field(x))?;
        }
    }
    if q2.len() != spec.obs_dim() || z2_effective.len() != spec.obs_dim() {
        return Err(Error::ShapeMismatch {
            expected: spec.obs_dim(),
            got: q2.len().min(z2_effective.len()),
        });
    }
    for (ch, q) in spec.obs_noise.iter().zip(q2) {
        h += ops.inner_product(q, &ch.field(x))?;
    }
    h += spec.running_cost(x, u, ops)?;
    let obs = spec.observe(x, u, ops)?;
    for (z2, hj) in z2_effective.iter().zip(&obs) {
        h += z2 * hj;
    }
    Ok(h)
}

/// First-order optimality residual: `min_v <grad_u H(x, u_hat), v - u_hat>`
/// over the candidate controls. Nonnegative (up to noise) at an optimizer of
/// the convex-control problem.
pub fn pontryagin_residual(
    spec: &ModelSpec,
    x: &Field,
    u_hat: &Field,
    candidates: &[Field],
    p: &Field,
    z2: &[f64],
    ops: &FemOperators,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let psi = gradient_field(spec, x, u_hat, p, z2, ops)?;
    let mut best = f64::INFINITY;
    for v in candidates {
        let mut dir = v.clone();
        dir.axpy(-1.0, u_hat);
        let val = ops.inner_product(&psi, &dir)?;
        if val < best {
            best = val;
        }
    }
    Ok(best)
}
