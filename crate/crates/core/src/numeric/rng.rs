//! Seeded randomness.
//!
//! Every draw in the library comes from [`Rng`]: ChaCha20 (a counter-based
//! stream cipher generator, identical output on every platform) seeded from a
//! 64-bit seed plus a 64-bit stream id. Normal variates use the ziggurat
//! sampler from `rand_distr`.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Deterministic random source: ChaCha20 keyed by `(seed, stream)`.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
    draws: u64,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha20+ziggurat";

    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent generator for sub-stream `stream` of `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
            draws: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Rewinds to the state right after construction.
    pub fn reset(&mut self) {
        *self = Self::with_stream(self.seed, self.stream);
    }

    /// Number of variates drawn since construction or the last reset.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.draws += 1;
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        self.draws += 1;
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        self.draws += 1;
        ((self.inner.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let data = (0..numel(shape)).map(|_| self.standard_normal()).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

/// `mean + std · ε` with `ε` standard normal.
pub fn gaussian_sample(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
    if !(std >= 0.0) {
        return Err(Error::domain(
            "gaussian_sample",
            format!("std must be non-negative, got {std}"),
        ));
    }
    let eps = rng.normal_tensor(shape);
    Ok(eps.map(|e| mean + std * e))
}

/// Source of standard-normal noise tensors.
///
/// Samplers and losses draw all their noise through this trait so tests can
/// swap in [`ZeroNoise`] or per-row generators.
pub trait NoiseSource {
    fn normal(&mut self, shape: &[usize]) -> Tensor;
}

impl NoiseSource for Rng {
    fn normal(&mut self, shape: &[usize]) -> Tensor {
        self.normal_tensor(shape)
    }
}

/// Noise source that always yields zeros.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn normal(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }
}

/// One generator per leading-axis row.
///
/// Row `b` of every requested tensor comes from `rngs[b]`, so a row's draws
/// do not depend on which other rows share the batch.
#[derive(Clone, Debug)]
pub struct RowNoise {
    rngs: Vec<Rng>,
}

impl RowNoise {
    pub fn new(rngs: Vec<Rng>) -> Self {
        RowNoise { rngs }
    }

    pub fn rows(&self) -> usize {
        self.rngs.len()
    }
}

impl NoiseSource for RowNoise {
    fn normal(&mut self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.first().copied(),
            Some(self.rngs.len()),
            "row noise requested for a different batch size"
        );
        let width = numel(&shape[1..]);
        let mut data = Vec::with_capacity(numel(shape));
        for rng in &mut self.rngs {
            for _ in 0..width {
                data.push(rng.standard_normal());
            }
        }
        Tensor::from_parts(shape.to_vec(), data)
    }
}
