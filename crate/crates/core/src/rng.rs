//! Seeded random sources.
//!
//! Every random draw in the crate goes through [`MixRng`], a ChaCha8 stream
//! cipher generator (counter-based) keyed by a 64-bit seed. Independent
//! sub-streams are selected with [`MixRng::stream`], so adding a new consumer
//! never perturbs the values seen by an existing one.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct MixRng {
    inner: ChaCha8Rng,
}

impl MixRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Generator for sub-stream `stream` of `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || std * self.normal())
    }

    pub fn normal_vector(&mut self, len: usize, std: f64) -> Array1<f64> {
        Array1::from_shape_simple_fn(len, || std * self.normal())
    }

    pub fn uniform_vector(&mut self, len: usize, lo: f64, hi: f64) -> Array1<f64> {
        Array1::from_shape_simple_fn(len, || self.uniform(lo, hi))
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || self.uniform(lo, hi))
    }
}
