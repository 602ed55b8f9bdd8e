//! Branching particle approximation of the conditional law of the state
//! given observations: propagate with the observation-driven dynamics,
//! accumulate exponential weights, and branch with a fixed population size.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::fem::{Field, FemOperators};
use crate::forward::step_particle_with_h;
use crate::math;
use crate::model::{InitialLaw, ModelSpec};
use crate::noise::{block_rng, fill_normal, StreamId, INIT_STEP};

/// Weighted particle cloud. Raw weights multiply across the steps of one
/// branching interval; `normalize` refreshes the normalized weights, and
/// `branch` consumes them, resetting the population to uniform.
#[derive(Debug, Clone)]
pub struct ParticleCloud {
    positions: Vec<Field>,
    raw_weights: Vec<f64>,
    norm_weights: Vec<f64>,
    /// Index of the branching interval the cloud is currently traversing.
    pub interval: u32,
}

impl ParticleCloud {
    /// Draw `s` particles from the initial law; weights start uniform.
    pub fn init(s: usize, initial: &InitialLaw, seed: u64) -> Result<Self> {
        if s == 0 {
            return Err(Error::InvalidConfig("population size must be >= 1".into()));
        }
        let positions = (0..s)
            .map(|slot| {
                let mut rng = block_rng(seed, StreamId::cloud_init(slot as u32), INIT_STEP);
                initial.sample(&mut rng)
            })
            .collect();
        Ok(ParticleCloud {
            positions,
            raw_weights: vec![1.0; s],
            norm_weights: vec![1.0 / s as f64; s],
            interval: 0,
        })
    }

    #[inline]
    pub fn population(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[Field] {
        &self.positions
    }

    pub fn raw_weights(&self) -> &[f64] {
        &self.raw_weights
    }

    pub fn normalized_weights(&self) -> &[f64] {
        &self.norm_weights
    }

    /// Advance every particle one step with its own noise substream and
    /// multiply its weight by the observation likelihood factor
    /// `exp(h(x_k, u_k) . dY_k - |h(x_k, u_k)|^2 dt / 2)` (left endpoint).
    pub fn propagate_and_weight(
        &mut self,
        u_k: &Field,
        dy_row: &[f64],
        step: usize,
        spec: &ModelSpec,
        ops: &FemOperators,
        seed: u64,
    ) -> Result<()> {
        let dt = ops.dt();
        let n_w = spec.n_w();
        let mut dw = vec![0.0; n_w];
        for slot in 0..self.positions.len() {
            let mut rng = block_rng(
                seed,
                StreamId::particle(self.interval, slot as u32),
                step as u64,
            );
            fill_normal(&mut rng, &mut dw, math::sqrt(dt));
            let h = spec.observe(&self.positions[slot], u_k, ops)?;
            let mut log_factor = 0.0;
            for (hj, dyj) in h.iter().zip(dy_row) {
                log_factor += hj * dyj - 0.5 * hj * hj * dt;
            }
            self.positions[slot] = step_particle_with_h(
                &self.positions[slot],
                u_k,
                &dw,
                dy_row,
                &h,
                spec,
                ops,
                step,
            )
            .map_err(|e| match e {
                Error::BlowUp { step, .. } => Error::BlowUp {
                    step,
                    context: "particle propagation",
                },
                other => other,
            })?;
            self.raw_weights[slot] *= math::exp(log_factor);
        }
        Ok(())
    }

    /// Refresh the normalized weights `Mbar = M / sum M`.
    pub fn normalize(&mut self) {
        let total: f64 = self.raw_weights.iter().sum();
        assert!(
            total > 0.0 && total.is_finite(),
            "exponential weights cannot vanish or overflow (sum = {total})"
        );
        for (nw, rw) in self.norm_weights.iter_mut().zip(&self.raw_weights) {
            *nw = rw / total;
        }
    }

    /// Effective sample size `1 / sum Mbar^2`.
    pub fn ess(&self) -> f64 {
        let sq: f64 = self.norm_weights.iter().map(|w| w * w).sum();
        1.0 / sq
    }

    /// Weighted posterior expectation of a functional of the state.
    pub fn posterior_expectation(&self, phi: impl Fn(&Field) -> f64) -> f64 {
        self.positions
            .iter()
            .zip(&self.norm_weights)
            .map(|(x, w)| w * phi(x))
            .sum()
    }

    /// Posterior mean field.
    pub fn posterior_mean(&self) -> Field {
        let n = self.positions[0].len();
        let mut mean = Field::zeros(n);
        for (x, w) in self.positions.iter().zip(&self.norm_weights) {
            mean.axpy(*w, x);
        }
        mean
    }

    /// Branch into offspring counts with mean `S Mbar` per particle, integer
    /// parts deterministic and the remaining offspring distributed by one
    /// systematic draw over the fractional parts. The population size is
    /// exactly preserved; offspring inherit the parent position; weights
    /// reset to uniform and the interval counter advances.
    pub fn branch(&mut self, rng: &mut ChaCha12Rng) {
        let s = self.positions.len();
        let counts = offspring_counts(&self.norm_weights, rng.random::<f64>());
        debug_assert_eq!(counts.iter().sum::<usize>(), s);
        let mut next = Vec::with_capacity(s);
        for (parent, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                next.push(self.positions[parent].clone());
            }
        }
        self.positions = next;
        for w in &mut self.raw_weights {
            *w = 1.0;
        }
        let uniform = 1.0 / s as f64;
        for w in &mut self.norm_weights {
            *w = uniform;
        }
        self.interval += 1;
    }
}

/// Offspring counts for normalized weights: `floor(S Mbar)` guaranteed per
/// particle, residual offspring placed by systematic sampling on the
/// fractional parts. Marginally each count is `floor` or `floor + 1` with
/// `P(+1) = frac(S Mbar)`, and the total is exactly `S`.
pub fn offspring_counts(norm_weights: &[f64], uniform: f64) -> Vec<usize> {
    let s = norm_weights.len();
    let mut counts = vec![0usize; s];
    let mut fracs = vec![0.0; s];
    let mut assigned = 0usize;
    for (i, &w) in norm_weights.iter().enumerate() {
        let target = s as f64 * w;
        let floor = math::floor(target);
        counts[i] = floor as usize;
        fracs[i] = target - floor;
        assigned += counts[i];
    }
    let residual = s - assigned;
    if residual == 0 {
        return counts;
    }
    let total_frac: f64 = fracs.iter().sum();
    // positions spaced total_frac/residual apart cover the cumulative
    // fractional mass; each interval is shorter than the spacing, so a
    // particle receives at most one extra offspring
    let spacing = total_frac / residual as f64;
    let mut next_pos = uniform * spacing;
    let mut cum = 0.0;
    let mut placed = 0usize;
    for i in 0..s {
        cum += fracs[i];
        while placed < residual && next_pos < cum {
            counts[i] += 1;
            placed += 1;
            next_pos += spacing;
        }
    }
    // guard against the last position landing on the boundary by rounding
    let mut i = s;
    while placed < residual {
        i -= 1;
        counts[i] += 1;
        placed += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearGaussian;
    use rand::SeedableRng;

    fn test_setup(s: usize) -> (FemOperators, ModelSpec, ParticleCloud) {
        let ops = FemOperators::assemble(10.0, 32, 0.01).unwrap();
        let spec = LinearGaussian::default().build(&ops);
        let cloud = ParticleCloud::init(s, &spec.initial, 42).unwrap();
        (ops, spec, cloud)
    }

    #[test]
    fn init_rejects_empty_population() {
        let ops = FemOperators::assemble(10.0, 32, 0.01).unwrap();
        let spec = LinearGaussian::default().build(&ops);
        assert!(ParticleCloud::init(0, &spec.initial, 1).is_err());
    }

    #[test]
    fn deterministic_initial_law_gives_identical_particles() {
        let ops = FemOperators::assemble(10.0, 32, 0.01).unwrap();
        let mean = crate::fem::sine_mode(ops.mesh(), 1);
        let law = InitialLaw::deterministic(mean.clone());
        let cloud = ParticleCloud::init(16, &law, 7).unwrap();
        for x in cloud.positions() {
            assert_eq!(x, &mean);
        }
        for &w in cloud.normalized_weights() {
            assert_eq!(w, 1.0 / 16.0);
        }
    }

    #[test]
    fn single_particle_carries_unit_weight() {
        let (_, _, cloud) = test_setup(1);
        assert_eq!(cloud.normalized_weights(), &[1.0]);
        assert_eq!(cloud.population(), 1);
    }

    #[test]
    fn initial_sample_mean_respects_clt_bound() {
        let (ops, spec, cloud) = test_setup(400);
        let mode = crate::fem::sine_mode(ops.mesh(), 1);
        let sample_mean = cloud.posterior_expectation(|x| ops.inner_product(x, &mode).unwrap());
        let true_mean = ops.inner_product(&spec.initial.mean, &mode).unwrap();
        // coordinate variance along mode 1 is spread^2
        let sigma = spec.initial.spread;
        let bound = 3.0 * sigma / (400f64).sqrt();
        assert!(
            (sample_mean - true_mean).abs() <= bound,
            "sample mean {sample_mean} vs {true_mean} (bound {bound})"
        );
    }

    #[test]
    fn zero_observation_map_leaves_weights_unchanged() {
        let ops = FemOperators::assemble(10.0, 32, 0.01).unwrap();
        let mut spec = LinearGaussian::default().build(&ops);
        spec.observation.link = crate::model::ObsLink::Zero;
        let mut cloud = ParticleCloud::init(8, &spec.initial, 3).unwrap();
        let u = Field::zeros(ops.n_dof());
        cloud
            .propagate_and_weight(&u, &[0.3, -0.1, 0.2], 0, &spec, &ops, 11)
            .unwrap();
        assert!(cloud.raw_weights().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn self_consistent_weight_reinforcement() {
        // A particle equal to the truth with dY = h dt sees the factor
        // exp(+|h|^2 dt / 2) > 1.
        let (ops, spec, _) = test_setup(1);
        let mean = spec.initial.mean.clone();
        let law = InitialLaw::deterministic(mean.clone());
        let mut cloud = ParticleCloud::init(1, &law, 5).unwrap();
        let u = Field::zeros(ops.n_dof());
        let h = spec.observe(&mean, &u, &ops).unwrap();
        let dy: Vec<f64> = h.iter().map(|hj| hj * ops.dt()).collect();
        cloud
            .propagate_and_weight(&u, &dy, 0, &spec, &ops, 5)
            .unwrap();
        let h_sq: f64 = h.iter().map(|hj| hj * hj).sum();
        let expect = (0.5 * h_sq * ops.dt()).exp();
        assert!((cloud.raw_weights()[0] - expect).abs() < 1e-12);
        assert!(cloud.raw_weights()[0] > 1.0);
    }

    #[test]
    fn normalize_examples() {
        let (_, _, mut cloud) = test_setup(3);
        cloud.raw_weights = vec![2.0, 1.0, 1.0];
        cloud.normalize();
        assert_eq!(cloud.normalized_weights(), &[0.5, 0.25, 0.25]);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        for _ in 0..100 {
            for w in &mut cloud.raw_weights {
                *w = rng.random::<f64>() + 1e-9;
            }
            cloud.normalize();
            let total: f64 = cloud.normalized_weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_expectation_examples() {
        let (_, _, mut cloud) = test_setup(5);
        assert!((cloud.posterior_expectation(|_| 1.0) - 1.0).abs() < 1e-15);
        // linear functional with equal weights = arithmetic mean
        let vals: Vec<f64> = cloud
            .positions()
            .iter()
            .map(|x| x.values().iter().sum::<f64>())
            .collect();
        let mean = vals.iter().sum::<f64>() / 5.0;
        let post = cloud.posterior_expectation(|x| x.values().iter().sum::<f64>());
        assert!((post - mean).abs() < 1e-12);
        // ESS right after init equals the population
        assert!((cloud.ess() - 5.0).abs() < 1e-12);
        cloud.raw_weights = vec![5.0, 1.0, 1.0, 1.0, 1.0];
        cloud.normalize();
        assert!(cloud.ess() < 5.0);
    }

    #[test]
    fn uniform_weights_branch_deterministically() {
        let (_, _, mut cloud) = test_setup(6);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        cloud.branch(&mut rng);
        assert_eq!(cloud.population(), 6);
        assert!(cloud.raw_weights().iter().all(|&w| w == 1.0));
        assert!((cloud.ess() - 6.0).abs() < 1e-12);
        assert_eq!(cloud.interval, 1);
    }

    #[test]
    fn offspring_counts_marginal_two_point_law() {
        // S Mbar = 2.3 for the first particle: offspring in {2, 3} with
        // P(3) ~ 0.3 marginally
        let weights = [2.3 / 4.0, 0.7 / 4.0, 0.5 / 4.0, 0.5 / 4.0];
        let mut hits = 0usize;
        let n = 100_000;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(31);
        for _ in 0..n {
            let counts = offspring_counts(&weights, rng.random::<f64>());
            assert_eq!(counts.iter().sum::<usize>(), 4);
            assert!(counts[0] == 2 || counts[0] == 3);
            if counts[0] == 3 {
                hits += 1;
            }
        }
        let p = hits as f64 / n as f64;
        let se = (0.3f64 * 0.7 / n as f64).sqrt();
        assert!((p - 0.3).abs() < 4.0 * se, "P(3) = {p}");
    }

    #[test]
    fn offspring_counts_match_means_and_conserve_population() {
        let weights = [0.5, 0.3, 0.1, 0.1];
        let n = 100_000;
        let mut sums = [0usize; 4];
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(77);
        for _ in 0..n {
            let counts = offspring_counts(&weights, rng.random::<f64>());
            assert_eq!(counts.iter().sum::<usize>(), 4, "population drifted");
            for (s, c) in sums.iter_mut().zip(&counts) {
                *s += c;
            }
        }
        for (j, &s) in sums.iter().enumerate() {
            let mean = s as f64 / n as f64;
            let target = 4.0 * weights[j];
            let frac = target - target.floor();
            let se = (frac * (1.0 - frac) / n as f64).sqrt().max(1e-9);
            assert!(
                (mean - target).abs() <= 3.0 * se + 1e-12,
                "particle {j}: mean {mean} vs {target}"
            );
        }
    }

    #[test]
    fn branch_preserves_population_under_random_weights() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1234);
        for s in [1usize, 2, 7, 50] {
            for _ in 0..200 {
                let mut raw: Vec<f64> = (0..s).map(|_| rng.random::<f64>() + 1e-12).collect();
                let total: f64 = raw.iter().sum();
                for w in &mut raw {
                    *w /= total;
                }
                let counts = offspring_counts(&raw, rng.random::<f64>());
                assert_eq!(counts.iter().sum::<usize>(), s);
            }
        }
    }
}
