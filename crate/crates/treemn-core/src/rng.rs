//! Seeded random streams.
//!
//! Every source of randomness in the pipeline (parameter init, shuffling,
//! data generation) draws from a named substream of one master seed, so a
//! single `--seed` pins the whole run.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Derives a deterministic child seed from `(seed, label)` with FNV-1a.
pub fn substream_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // one extra round over the seed bytes so seed=0 still separates labels
    for b in seed.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A seeded generator for the named substream.
pub fn substream(seed: u64, label: &str) -> StdRng {
    StdRng::seed_from_u64(substream_seed(seed, label))
}

/// Standard normal via Box-Muller; kept local so generated datasets stay
/// byte-identical regardless of external sampler changes.
pub fn normal(rng: &mut StdRng) -> f64 {
    let u1: f64 = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform in `[-bound, bound]`, the conventional init range here.
pub fn uniform_init(rng: &mut StdRng, bound: f64) -> f64 {
    rng.gen_range(-bound..=bound)
}
