//! Seeded random streams. Every stochastic draw in the crate comes from a
//! stream keyed by `(seed, stream id)` so results never depend on call order
//! or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids for distinct purposes, combined with an index.
pub fn stream_id(purpose: u8, index: u64) -> u64 {
    ((purpose as u64) << 56) ^ index
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn normal_f64(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
