//! Seeded synthetic inputs: Gaussian tensors and the shared-outlier
//! activation model, where every head sees the same outlier-heavy signal plus
//! small independent noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_tensor(seed: u64, shape: Vec<usize>, sigma: f32) -> Tensor {
    let mut r = rng(seed);
    gaussian_from(&mut r, shape, sigma)
}

pub fn gaussian_from(rng: &mut impl Rng, shape: Vec<usize>, sigma: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal) * sigma)
}

/// Parameters of the shared-outlier generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharedOutlierSpec {
    /// Channels (per `head_dim` row) carrying large shared magnitudes.
    pub outlier_channels: usize,
    /// Multiplier applied to the shared signal on outlier channels.
    pub outlier_scale: f32,
    /// Standard deviation of the per-head noise relative to the shared signal.
    pub head_noise: f32,
}

impl Default for SharedOutlierSpec {
    fn default() -> Self {
        Self {
            outlier_channels: 2,
            outlier_scale: 16.0,
            head_noise: 0.1,
        }
    }
}

impl SharedOutlierSpec {
    pub fn identical_heads() -> Self {
        Self {
            head_noise: 0.0,
            ..Self::default()
        }
    }

    /// Picks the outlier channel indices for a row of `head_dim`.
    pub fn pick_channels(&self, rng: &mut impl Rng, head_dim: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..head_dim).collect();
        for i in 0..self.outlier_channels.min(head_dim) {
            let j = rng.random_range(i..head_dim);
            idx.swap(i, j);
        }
        idx.truncate(self.outlier_channels.min(head_dim));
        idx
    }
}

/// `[tokens, heads, head_dim]` activations `x^i = c + noise^i`, where `c` is a
/// unit Gaussian row whose outlier channels are scaled up and shared by all
/// heads.
pub fn shared_outlier_activations(
    rng: &mut impl Rng,
    tokens: usize,
    heads: usize,
    head_dim: usize,
    spec: &SharedOutlierSpec,
) -> Tensor {
    let channels = spec.pick_channels(rng, head_dim);
    let mut data = Vec::with_capacity(tokens * heads * head_dim);
    let mut shared = vec![0.0f32; head_dim];
    for _ in 0..tokens {
        for (j, s) in shared.iter_mut().enumerate() {
            let v: f32 = rng.sample(StandardNormal);
            *s = if channels.contains(&j) { v * spec.outlier_scale } else { v };
        }
        for _ in 0..heads {
            for &s in &shared {
                let noise: f32 = rng.sample(StandardNormal);
                data.push(s + spec.head_noise * noise);
            }
        }
    }
    Tensor::new(vec![tokens, heads, head_dim], data).expect("shape matches generated data")
}
