use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// Lower/upper clamp for uniforms feeding the Gumbel transform.
pub const UNIFORM_CLAMP: f64 = 1e-12;

/// Seeded, platform-independent random stream. Single owner; not `Sync` by use.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Standard Gumbel draw `-ln(-ln u)` with `u` clamped into
    /// `[UNIFORM_CLAMP, 1 - UNIFORM_CLAMP]`.
    pub fn gumbel(&mut self) -> f64 {
        let u = self.uniform().clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
        -(-u.ln()).ln()
    }
}

/// I.i.d. standard Gumbel samples of the given shape.
pub fn gumbel_sample(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gumbel())
}

impl Tensor {
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| std * rng.normal())
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi))
    }
}
