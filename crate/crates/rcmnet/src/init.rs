//! Seeded parameter initialization. All randomness in the crate flows through
//! `ChaCha8Rng` so runs are reproducible bit for bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Kaiming-style fan-in init: N(0, sqrt(2 / fan_in)).
pub fn kaiming(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let sigma = (2.0 / fan_in as f64).sqrt();
    gaussian(rng, sigma, n)
}

pub fn gaussian(rng: &mut ChaCha8Rng, sigma: f64, n: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, sigma).expect("valid sigma");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Derive an independent stream from a base seed and a purpose label, so the
/// init / shuffle / balance / synth streams never alias.
pub fn sub_seed(seed: u64, purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Fisher-Yates shuffle driven by the given rng.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
