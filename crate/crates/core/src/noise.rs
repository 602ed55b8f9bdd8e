//! Reproducible Brownian increments for the truncated cylindrical process
//! and the observation noise.
//!
//! Every random draw in the solver comes from a block cipher keyed on
//! `(seed, stream, step)`, so any worker can generate any block in any order
//! and the whole run stays a pure function of `(configuration, seed)`.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fem::{Field, FemOperators};
use crate::math;
use crate::model::ModelSpec;

/// Logical substream identifier. Tags keep the per-purpose streams disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId(pub u64);

impl StreamId {
    /// State noise driving the synthetic truth path.
    pub fn truth_state() -> Self {
        StreamId(1 << 56)
    }

    /// Observation noise added to the synthetic truth observations.
    pub fn truth_obs() -> Self {
        StreamId(2 << 56)
    }

    /// Initial-law draw for particle `slot`.
    pub fn cloud_init(slot: u32) -> Self {
        StreamId((3 << 56) | slot as u64)
    }

    /// Propagation noise for particle `slot` during branching interval
    /// `interval` (offspring get fresh streams every interval).
    pub fn particle(interval: u32, slot: u32) -> Self {
        StreamId((4 << 56) | ((interval as u64) << 24) | slot as u64)
    }

    /// Hypothetical-future rollout inside the SGD loop.
    pub fn rollout(outer: u32, iter: u32, batch: u32) -> Self {
        StreamId((5 << 56) | ((outer as u64) << 36) | ((iter as u64) << 8) | batch as u64)
    }

    /// Monte-Carlo cost sample `sample` in evaluation context `context`.
    pub fn cost_sample(context: u32, sample: u32) -> Self {
        StreamId((6 << 56) | ((context as u64) << 24) | sample as u64)
    }

    /// The single uniform draw of one branching event.
    pub fn branch_event(interval: u32) -> Self {
        StreamId((7 << 56) | interval as u64)
    }

    /// Particle selection at the start of one SGD iteration.
    pub fn particle_pick(outer: u32, iter: u32) -> Self {
        StreamId((8 << 56) | ((outer as u64) << 24) | iter as u64)
    }

    /// Free-form stream for tests and ad-hoc sampling.
    pub fn custom(id: u64) -> Self {
        StreamId((9 << 56) | (id & ((1 << 56) - 1)))
    }
}

/// Step index reserved for draws that happen before time stepping begins
/// (initial-law samples, selection draws).
pub const INIT_STEP: u64 = u64::MAX;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Generator for the block of draws belonging to `(seed, stream, step)`.
pub fn block_rng(seed: u64, stream: StreamId, step: u64) -> ChaCha12Rng {
    let a = splitmix(seed ^ 0x243F6A8885A308D3);
    let b = splitmix(a ^ stream.0);
    let c = splitmix(b ^ step);
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix(c.wrapping_add(i as u64 + 1)).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Fill `out` with independent `N(0, scale^2)` draws.
pub fn fill_normal<R: Rng>(rng: &mut R, out: &mut [f64], scale: f64) {
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = scale * z;
    }
}

/// Materialized increments of one path: `n_steps` rows of `n_w` cylindrical
/// channel increments and `d` observation-noise increments, all `N(0, dt)`.
#[derive(Debug, Clone)]
pub struct NoisePath {
    pub dt: f64,
    pub seed: u64,
    pub stream: StreamId,
    n_steps: usize,
    n_w: usize,
    d: usize,
    dw: Vec<f64>,
    db: Vec<f64>,
}

impl NoisePath {
    pub fn sample(
        seed: u64,
        stream: StreamId,
        n_steps: usize,
        n_w: usize,
        d: usize,
        dt: f64,
    ) -> Result<Self> {
        if n_w == 0 || d == 0 || n_steps == 0 {
            return Err(Error::InvalidConfig(
                "noise path needs n_steps, n_w, d >= 1".into(),
            ));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidConfig(alloc::format!(
                "noise path needs dt > 0, got {dt}"
            )));
        }
        let sd = math::sqrt(dt);
        let mut dw = vec![0.0; n_steps * n_w];
        let mut db = vec![0.0; n_steps * d];
        for k in 0..n_steps {
            let mut rng = block_rng(seed, stream, k as u64);
            fill_normal(&mut rng, &mut dw[k * n_w..(k + 1) * n_w], sd);
            fill_normal(&mut rng, &mut db[k * d..(k + 1) * d], sd);
        }
        Ok(NoisePath {
            dt,
            seed,
            stream,
            n_steps,
            n_w,
            d,
            dw,
            db,
        })
    }

    #[inline]
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    #[inline]
    pub fn dw_row(&self, k: usize) -> &[f64] {
        &self.dw[k * self.n_w..(k + 1) * self.n_w]
    }

    #[inline]
    pub fn db_row(&self, k: usize) -> &[f64] {
        &self.db[k * self.d..(k + 1) * self.d]
    }
}

/// Truncated cylindrical increment `sum_i sigma^i(x) shape_i dW_i` as a field.
pub fn apply_cylindrical(
    spec: &ModelSpec,
    x: &Field,
    dw_row: &[f64],
    ops: &FemOperators,
) -> Result<Field> {
    if dw_row.len() != spec.state_noise.len() {
        return Err(Error::ShapeMismatch {
            expected: spec.state_noise.len(),
            got: dw_row.len(),
        });
    }
    if x.len() != ops.n_dof() {
        return Err(Error::ShapeMismatch {
            expected: ops.n_dof(),
            got: x.len(),
        });
    }
    let mut out = Field::zeros(x.len());
    accumulate_channels(&spec.state_noise, x.values(), dw_row, out.values_mut());
    Ok(out)
}

/// `out += sum_c amp_c(x) shape_c incr_c`, shared by the forward steppers.
pub(crate) fn accumulate_channels(
    channels: &[crate::model::NoiseChannel],
    x: &[f64],
    incr: &[f64],
    out: &mut [f64],
) {
    for (ch, &dz) in channels.iter().zip(incr) {
        if dz == 0.0 {
            continue;
        }
        let shape = ch.shape.values();
        for i in 0..out.len() {
            out[i] += (ch.amp)(x[i]) * shape[i] * dz;
        }
    }
}
