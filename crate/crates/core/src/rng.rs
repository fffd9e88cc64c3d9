//! Seeded noise sources.
//!
//! Every stochastic operation takes a caller-owned RNG. Loops that need
//! reproducibility independent of batching derive one ChaCha stream per
//! unit of work with [`stream`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Scalar;

pub type NoiseSource = ChaCha8Rng;

pub fn seeded(seed: u64) -> NoiseSource {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `id` of the generator seeded with `seed`.
pub fn stream(seed: u64, id: u64) -> NoiseSource {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Standard normal draw. Always drawn in f64 so that f32 and f64 models
/// consume identical noise.
pub fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    let v: f64 = rng.sample(StandardNormal);
    T::lit(v)
}

pub fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> T {
    T::lit(rng.random_range(lo..=hi))
}

pub fn normals<T: Scalar, R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<T> {
    (0..count).map(|_| normal(rng)).collect()
}
