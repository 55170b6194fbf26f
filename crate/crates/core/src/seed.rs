//! Named sub-seed derivation so every source of randomness in a run
//! flows from the single `--seed` value.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive a sub-seed from a base seed and a label (FNV-1a over the label,
/// mixed with the base through splitmix64).
pub fn derive(base: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(base ^ h)
}

/// Sub-seed for the `i`-th sample of a class in a dataset, independent of
/// generation order.
pub fn sample_seed(base: u64, class_id: usize, index: usize) -> u64 {
    splitmix64(base ^ splitmix64((class_id as u64) << 32 ^ index as u64))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
