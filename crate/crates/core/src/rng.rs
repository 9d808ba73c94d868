//! Seedable, splittable random streams.
//!
//! Every consumer of randomness (data noise, weight init, shuffling) draws
//! from its own ChaCha stream derived from the experiment seed, so changing
//! how much one consumer draws never perturbs another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent stream identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Shuffle = 3,
    Misc = 4,
}

/// Deterministic generator with a Box–Muller normal sampler.
#[derive(Debug, Clone)]
pub struct LabRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl LabRng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream as u64);
        LabRng { inner, spare: None }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Standard normal deviate. Deviates are produced in Box–Muller pairs;
    /// the second of each pair is kept for the next call.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let (z0, z1) = self.normal_pair();
        self.spare = Some(z1);
        z0
    }

    /// One fresh Box–Muller pair, ignoring any cached spare.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        // 1 - U lies in (0, 1], keeping the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (radius * theta.cos(), radius * theta.sin())
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
