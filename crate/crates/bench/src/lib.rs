//! Shared fixtures for the criterion benchmarks.

use urkle_core::rng::{seeded, uniform};
use urkle_core::{Encoder, EncoderSpec, Tensor};

/// `n` images of 28×28 with uniform pixels.
pub fn digit_batch(n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = seeded(seed);
    let data = (0..n * 784).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
    Tensor::from_vec([n, 1, 28, 28], data).expect("shape matches data")
}

/// Convolutional digit encoder with random weights.
pub fn digit_encoder(d_z: usize, seed: u64) -> Encoder<f32> {
    Encoder::new(EncoderSpec::mnist(d_z), &mut seeded(seed)).expect("valid encoder spec")
}
