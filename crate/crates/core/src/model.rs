//! The controlled SPDE problem definition: Nemytskii coefficients with their
//! derivatives, the functional observation map, cost integrands, the
//! admissible-set projection and the initial law, plus the built-in presets.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fem::{sine_mode, Field, FemOperators, Mesh1D};
use crate::math;

pub type Map1 = Box<dyn Fn(f64) -> f64 + Send + Sync>;
pub type Map2 = Box<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Pointwise drift `b(x, u)` with partials.
pub struct Drift {
    pub value: Map2,
    pub dx: Map2,
    pub du: Map2,
}

/// Pointwise running cost `l(x, u)` with partials.
pub struct RunningCost {
    pub value: Map2,
    pub dx: Map2,
    pub du: Map2,
}

/// Pointwise terminal cost `m(x)` with partial.
pub struct TerminalCost {
    pub value: Map1,
    pub dx: Map1,
}

/// One noise channel: a pointwise amplitude map applied to the state,
/// multiplied by a fixed spatial shape. Channel `i` contributes
/// `amp(x(.)) * shape(.) * dW_i` to the state equation.
pub struct NoiseChannel {
    pub amp: Map1,
    pub amp_dx: Map1,
    pub shape: Field,
}

impl NoiseChannel {
    /// Nodal field `amp(x) * shape`.
    pub fn field(&self, x: &Field) -> Field {
        Field::from_fn(x.len(), |i| {
            (self.amp)(x.values()[i]) * self.shape.values()[i]
        })
    }

    /// True when the amplitude has zero state derivative everywhere probed.
    pub fn is_additive(&self) -> bool {
        // cheap structural probe; models with genuinely state-dependent
        // amplitudes will report non-additive on at least one of these
        [-2.0, -0.3, 0.0, 0.7, 1.9]
            .iter()
            .all(|&x| (self.amp_dx)(x) == 0.0)
    }
}

/// Scalar link applied to each sensor pairing in the observation map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsLink {
    /// `h_j = arctan(<x (+u), sensor_j>)`; bounded by pi/2.
    Arctan,
    /// `h_j = <x (+u), sensor_j>` (linear-Gaussian test model).
    Linear,
    /// `h = 0` (decoupled observations; keeps the dimension for wiring).
    Zero,
}

/// Functional observation map `h: (x, u) -> R^d` built from pre-selected
/// detection elements, one per component.
pub struct Observation {
    pub sensors: Vec<Field>,
    pub link: ObsLink,
    /// Whether the control enters the pairing (`<x+u, sensor>` vs `<x, sensor>`).
    pub with_control: bool,
}

/// Metric projection onto the convex admissible set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    /// U is the whole space.
    Identity,
    /// Per-node box constraints.
    Box { lo: f64, hi: f64 },
}

impl Projection {
    pub fn apply(&self, u: &mut Field) {
        if let Projection::Box { lo, hi } = *self {
            for v in u.values_mut() {
                *v = v.clamp(lo, hi);
            }
        }
    }
}

/// Initial law: a deterministic mean plus `spread * sum_k xi_k e_k` over the
/// first `n_modes` Dirichlet sine modes, `xi_k` i.i.d. standard normal.
pub struct InitialLaw {
    pub mean: Field,
    pub spread: f64,
    pub n_modes: usize,
    modes: Vec<Field>,
}

impl InitialLaw {
    pub fn deterministic(mean: Field) -> Self {
        InitialLaw {
            mean,
            spread: 0.0,
            n_modes: 0,
            modes: Vec::new(),
        }
    }

    pub fn gaussian(mean: Field, spread: f64, n_modes: usize, mesh: &Mesh1D) -> Self {
        let modes = (1..=n_modes).map(|k| sine_mode(mesh, k)).collect();
        InitialLaw {
            mean,
            spread,
            n_modes,
            modes,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Field {
        let mut x = self.mean.clone();
        for mode in &self.modes {
            let xi: f64 = rng.sample(StandardNormal);
            x.axpy(self.spread * xi, mode);
        }
        x
    }
}

/// The full coefficient set of one control problem instance, discretized on
/// a fixed mesh. Immutable and shareable; evaluations are pure.
pub struct ModelSpec {
    pub name: String,
    pub drift: Drift,
    /// Cylindrical state-noise channels (sigma^i), truncated to `n_w`.
    pub state_noise: Vec<NoiseChannel>,
    /// Observation-correlated channels (g^j), one per observation component.
    pub obs_noise: Vec<NoiseChannel>,
    pub observation: Observation,
    pub running: RunningCost,
    pub terminal: TerminalCost,
    pub projection: Projection,
    pub initial: InitialLaw,
}

impl ModelSpec {
    /// Number of retained cylindrical channels.
    pub fn n_w(&self) -> usize {
        self.state_noise.len()
    }

    /// Observation dimension.
    pub fn obs_dim(&self) -> usize {
        self.observation.sensors.len()
    }

    pub fn validate(&self, ops: &FemOperators) -> Result<()> {
        let n = ops.n_dof();
        if self.obs_noise.len() != self.obs_dim() {
            return Err(Error::InvalidConfig(alloc::format!(
                "{} observation-noise channels for {} sensors",
                self.obs_noise.len(),
                self.obs_dim()
            )));
        }
        for ch in self.state_noise.iter().chain(&self.obs_noise) {
            if ch.shape.len() != n {
                return Err(Error::ShapeMismatch {
                    expected: n,
                    got: ch.shape.len(),
                });
            }
        }
        for s in &self.observation.sensors {
            if s.len() != n {
                return Err(Error::ShapeMismatch {
                    expected: n,
                    got: s.len(),
                });
            }
        }
        if self.initial.mean.len() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                got: self.initial.mean.len(),
            });
        }
        Ok(())
    }

    /// Sensor pairings `s_j = <x (+u), sensor_j>`.
    fn sensor_pairings(&self, x: &Field, u: &Field, ops: &FemOperators) -> Result<Vec<f64>> {
        let mut combined = x.clone();
        if self.observation.with_control {
            combined.axpy(1.0, u);
        }
        self.observation
            .sensors
            .iter()
            .map(|s| ops.inner_product(&combined, s))
            .collect()
    }

    /// Observation map `h(x, u)`.
    pub fn observe(&self, x: &Field, u: &Field, ops: &FemOperators) -> Result<Vec<f64>> {
        let s = self.sensor_pairings(x, u, ops)?;
        Ok(match self.observation.link {
            ObsLink::Arctan => s.iter().map(|&v| math::atan(v)).collect(),
            ObsLink::Linear => s,
            ObsLink::Zero => s.iter().map(|_| 0.0).collect(),
        })
    }

    /// Riesz representers of the Gateaux derivatives of `h`: component `j`
    /// of the state derivative acts as `<dx_j, .>` and of the control
    /// derivative as `<du_j, .>` in the discrete L2 product.
    pub fn observation_gradient(
        &self,
        x: &Field,
        u: &Field,
        ops: &FemOperators,
    ) -> Result<ObsGradient> {
        let s = self.sensor_pairings(x, u, ops)?;
        let gains: Vec<f64> = match self.observation.link {
            ObsLink::Arctan => s.iter().map(|&v| 1.0 / (1.0 + v * v)).collect(),
            ObsLink::Linear => s.iter().map(|_| 1.0).collect(),
            ObsLink::Zero => s.iter().map(|_| 0.0).collect(),
        };
        let dx: Vec<Field> = self
            .observation
            .sensors
            .iter()
            .zip(&gains)
            .map(|(sensor, &g)| sensor.scaled(g))
            .collect();
        let du = if self.observation.with_control {
            dx.clone()
        } else {
            dx.iter().map(|f| Field::zeros(f.len())).collect()
        };
        Ok(ObsGradient { dx, du })
    }

    /// `L(x, u) = integral of l(x(.), u(.))`, by mass-matrix quadrature of
    /// the nodal integrand.
    pub fn running_cost(&self, x: &Field, u: &Field, ops: &FemOperators) -> Result<f64> {
        if x.len() != u.len() {
            return Err(Error::ShapeMismatch {
                expected: x.len(),
                got: u.len(),
            });
        }
        let w = ops.quad_weights();
        if w.len() != x.len() {
            return Err(Error::ShapeMismatch {
                expected: w.len(),
                got: x.len(),
            });
        }
        Ok(x.values()
            .iter()
            .zip(u.values())
            .zip(w)
            .map(|((&xv, &uv), &wv)| wv * (self.running.value)(xv, uv))
            .sum())
    }

    /// Integral of `m(x(.))` by the same quadrature.
    pub fn terminal_cost(&self, x: &Field, ops: &FemOperators) -> Result<f64> {
        let w = ops.quad_weights();
        if w.len() != x.len() {
            return Err(Error::ShapeMismatch {
                expected: w.len(),
                got: x.len(),
            });
        }
        Ok(x.values()
            .iter()
            .zip(w)
            .map(|(&xv, &wv)| wv * (self.terminal.value)(xv))
            .sum())
    }

    pub fn project(&self, u: &mut Field) {
        self.projection.apply(u);
    }
}

/// Derivative representers of the observation map.
pub struct ObsGradient {
    pub dx: Vec<Field>,
    pub du: Vec<Field>,
}

/// Lift a pointwise map to fields: `out(.) = f(x(.), u(.))`.
pub fn apply_nemytskii(f: impl Fn(f64, f64) -> f64, x: &Field, u: &Field) -> Result<Field> {
    if x.len() != u.len() {
        return Err(Error::ShapeMismatch {
            expected: x.len(),
            got: u.len(),
        });
    }
    Ok(Field::from_fn(x.len(), |i| {
        f(x.values()[i], u.values()[i])
    }))
}

/// Unit-L2-norm Gaussian bump centered at `center` with width `width`,
/// normalized in the discrete mass norm so sensor pairings are exact on the
/// given mesh.
pub fn gaussian_bump(ops: &FemOperators, center: f64, width: f64) -> Field {
    let raw = ops
        .mesh()
        .interpolate(|lam| math::exp(-(lam - center) * (lam - center) / (2.0 * width * width)));
    let norm = ops.norm(&raw).expect("bump on own mesh");
    raw.scaled(1.0 / norm)
}

/// Detection elements for `d` sensors: bumps at `j L / (d+1)`, `j = 1..=d`.
pub fn default_sensors(ops: &FemOperators, d: usize, width: f64) -> Vec<Field> {
    let l = ops.mesh().length();
    (1..=d)
        .map(|j| gaussian_bump(ops, j as f64 * l / (d + 1) as f64, width))
        .collect()
}

/// Parameters of the stochastic-heat-equation benchmark preset.
#[derive(Debug, Clone, Copy)]
pub struct HeatBenchmark {
    pub n_w: usize,
    pub d: usize,
    pub sigma_amp: f64,
    pub g_amp: f64,
    pub sensor_width: f64,
    pub x0_amplitude: f64,
}

impl Default for HeatBenchmark {
    fn default() -> Self {
        HeatBenchmark {
            n_w: 50,
            d: 5,
            sigma_amp: 0.05,
            g_amp: 0.03,
            sensor_width: 0.5,
            x0_amplitude: 0.6,
        }
    }
}

impl HeatBenchmark {
    /// Controlled stochastic heat equation on `(0, 10)`:
    /// drift `u`, additive cylindrical noise of amplitude `sigma_amp`,
    /// observation-correlated channels `g_amp (x+1) e_j`, observation
    /// `arctan(<x+u, sensor_j>)`, quadratic running and terminal costs.
    pub fn build(&self, ops: &FemOperators) -> ModelSpec {
        let mesh = ops.mesh();
        let sigma_amp = self.sigma_amp;
        let g_amp = self.g_amp;
        let state_noise = (1..=self.n_w)
            .map(|i| NoiseChannel {
                amp: Box::new(move |_| sigma_amp),
                amp_dx: Box::new(|_| 0.0),
                shape: sine_mode(mesh, i),
            })
            .collect();
        let obs_noise = (1..=self.d)
            .map(|j| NoiseChannel {
                amp: Box::new(move |x| g_amp * (x + 1.0)),
                amp_dx: Box::new(move |_| g_amp),
                shape: sine_mode(mesh, j),
            })
            .collect();
        let amp = self.x0_amplitude;
        let l = mesh.length();
        let mean = mesh.interpolate(|lam| amp * math::sin(core::f64::consts::PI * lam / l));
        ModelSpec {
            name: "heat_benchmark".into(),
            drift: Drift {
                value: Box::new(|_, u| u),
                dx: Box::new(|_, _| 0.0),
                du: Box::new(|_, _| 1.0),
            },
            state_noise,
            obs_noise,
            observation: Observation {
                sensors: default_sensors(ops, self.d, self.sensor_width),
                link: ObsLink::Arctan,
                with_control: true,
            },
            running: RunningCost {
                value: Box::new(|x, u| 0.5 * (x * x + u * u)),
                dx: Box::new(|x, _| x),
                du: Box::new(|_, u| u),
            },
            terminal: TerminalCost {
                value: Box::new(|x| 0.5 * x * x),
                dx: Box::new(|x| x),
            },
            projection: Projection::Identity,
            initial: InitialLaw::deterministic(mean),
        }
    }
}

/// Parameters of the linear-Gaussian filtering test preset.
#[derive(Debug, Clone, Copy)]
pub struct LinearGaussian {
    pub n_w: usize,
    pub d: usize,
    pub sigma_amp: f64,
    pub sensor_width: f64,
    pub x0_amplitude: f64,
    pub initial_spread: f64,
    pub initial_modes: usize,
}

impl Default for LinearGaussian {
    fn default() -> Self {
        LinearGaussian {
            n_w: 8,
            d: 3,
            sigma_amp: 0.1,
            sensor_width: 0.5,
            x0_amplitude: 1.0,
            initial_spread: 0.25,
            initial_modes: 6,
        }
    }
}

impl LinearGaussian {
    /// Heat equation with additive noise, linear sensors `<x, sensor_j>`,
    /// no observation-correlated state noise and a Gaussian initial law.
    /// The exact conditional mean is computable by a discrete Kalman filter,
    /// which is what the filter-consistency tests check against.
    pub fn build(&self, ops: &FemOperators) -> ModelSpec {
        let mesh = ops.mesh();
        let sigma_amp = self.sigma_amp;
        let state_noise = (1..=self.n_w)
            .map(|i| NoiseChannel {
                amp: Box::new(move |_| sigma_amp),
                amp_dx: Box::new(|_| 0.0),
                shape: sine_mode(mesh, i),
            })
            .collect();
        let obs_noise = (1..=self.d)
            .map(|j| NoiseChannel {
                amp: Box::new(|_| 0.0),
                amp_dx: Box::new(|_| 0.0),
                shape: sine_mode(mesh, j),
            })
            .collect();
        let amp = self.x0_amplitude;
        let l = mesh.length();
        let mean = mesh.interpolate(|lam| amp * math::sin(core::f64::consts::PI * lam / l));
        ModelSpec {
            name: "linear_gaussian_test".into(),
            drift: Drift {
                value: Box::new(|_, u| u),
                dx: Box::new(|_, _| 0.0),
                du: Box::new(|_, _| 1.0),
            },
            state_noise,
            obs_noise,
            observation: Observation {
                sensors: default_sensors(ops, self.d, self.sensor_width),
                link: ObsLink::Linear,
                with_control: false,
            },
            running: RunningCost {
                value: Box::new(|x, u| 0.5 * (x * x + u * u)),
                dx: Box::new(|x, _| x),
                du: Box::new(|_, u| u),
            },
            terminal: TerminalCost {
                value: Box::new(|x| 0.5 * x * x),
                dx: Box::new(|x| x),
            },
            projection: Projection::Identity,
            initial: InitialLaw::gaussian(mean, self.initial_spread, self.initial_modes, mesh),
        }
    }
}

/// Randomized check that every supplied derivative matches central finite
/// differences of its primitive. Runs on any model at registration time.
pub fn check_derivatives(spec: &ModelSpec, ops: &FemOperators, seed: u64) -> Result<()> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let eps = 1e-5;
    let tol = 1e-5;
    let rel_err = |fd: f64, an: f64| {
        let scale = math::abs(fd).max(math::abs(an)).max(1e-3);
        math::abs(fd - an) / scale
    };
    let mut probe2 = |name: &str, f: &Map2, dx: &Map2, du: &Map2| -> Result<()> {
        for _ in 0..32 {
            let x = rng.random::<f64>() * 4.0 - 2.0;
            let u = rng.random::<f64>() * 4.0 - 2.0;
            let fd_x = (f(x + eps, u) - f(x - eps, u)) / (2.0 * eps);
            let fd_u = (f(x, u + eps) - f(x, u - eps)) / (2.0 * eps);
            if rel_err(fd_x, dx(x, u)) > tol || rel_err(fd_u, du(x, u)) > tol {
                return Err(Error::InvalidConfig(alloc::format!(
                    "derivative of {name} inconsistent at ({x}, {u})"
                )));
            }
        }
        Ok(())
    };
    probe2("drift", &spec.drift.value, &spec.drift.dx, &spec.drift.du)?;
    probe2(
        "running cost",
        &spec.running.value,
        &spec.running.dx,
        &spec.running.du,
    )?;
    for _ in 0..32 {
        let x = rng.random::<f64>() * 4.0 - 2.0;
        let fd = ((spec.terminal.value)(x + eps) - (spec.terminal.value)(x - eps)) / (2.0 * eps);
        if rel_err(fd, (spec.terminal.dx)(x)) > tol {
            return Err(Error::InvalidConfig(alloc::format!(
                "terminal cost derivative inconsistent at {x}"
            )));
        }
    }
    for (k, ch) in spec.state_noise.iter().chain(&spec.obs_noise).enumerate() {
        for _ in 0..16 {
            let x = rng.random::<f64>() * 4.0 - 2.0;
            let fd = ((ch.amp)(x + eps) - (ch.amp)(x - eps)) / (2.0 * eps);
            if rel_err(fd, (ch.amp_dx)(x)) > tol {
                return Err(Error::InvalidConfig(alloc::format!(
                    "noise amplitude derivative inconsistent in channel {k}"
                )));
            }
        }
    }
    // Observation map: directional derivatives against the representers.
    let n = ops.n_dof();
    let mut rand_field = |scale: f64| {
        let mut f = Field::zeros(n);
        for v in f.values_mut() {
            *v = (rng.random::<f64>() * 2.0 - 1.0) * scale;
        }
        f
    };
    for _ in 0..8 {
        let x = rand_field(1.0);
        let u = rand_field(1.0);
        let delta = rand_field(1.0);
        let grad = spec.observation_gradient(&x, &u, ops)?;
        let mut xp = x.clone();
        xp.axpy(eps, &delta);
        let mut xm = x.clone();
        xm.axpy(-eps, &delta);
        let hp = spec.observe(&xp, &u, ops)?;
        let hm = spec.observe(&xm, &u, ops)?;
        for j in 0..spec.obs_dim() {
            let fd = (hp[j] - hm[j]) / (2.0 * eps);
            let an = ops.inner_product(&grad.dx[j], &delta)?;
            if rel_err(fd, an) > 1e-6 && math::abs(fd - an) > 1e-9 {
                return Err(Error::InvalidConfig(alloc::format!(
                    "observation state-derivative inconsistent in component {j}"
                )));
            }
        }
        let mut up = u.clone();
        up.axpy(eps, &delta);
        let mut um = u.clone();
        um.axpy(-eps, &delta);
        let hp = spec.observe(&x, &up, ops)?;
        let hm = spec.observe(&x, &um, ops)?;
        for j in 0..spec.obs_dim() {
            let fd = (hp[j] - hm[j]) / (2.0 * eps);
            let an = ops.inner_product(&grad.du[j], &delta)?;
            if rel_err(fd, an) > 1e-6 && math::abs(fd - an) > 1e-9 {
                return Err(Error::InvalidConfig(alloc::format!(
                    "observation control-derivative inconsistent in component {j}"
                )));
            }
        }
    }
    Ok(())
}
