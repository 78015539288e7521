//! Splittable, counter-style random streams.
//!
//! Every stochastic choice in the crate draws from a [`ChaCha8Rng`] seeded by an
//! [`RngKey`] derived from (run seed, purpose tag, meta-step, stream index, ...).
//! Derivation is pure, so any parallel execution order reproduces the same draws.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream-purpose tags. Distinct tags keep sibling streams decorrelated.
pub mod tag {
    pub const CONTEXTS: u64 = 0x01;
    pub const LABELS: u64 = 0x02;
    pub const VIEWS: u64 = 0x03;
    pub const RECALL: u64 = 0x04;
    pub const DATA: u64 = 0x05;
    pub const SPLIT: u64 = 0x06;
    pub const EVAL_TASK: u64 = 0x07;
    pub const EVAL_CV: u64 = 0x08;
    pub const INIT: u64 = 0x09;
    pub const STEP: u64 = 0x0a;
}

/// SplitMix64 finalizer; full-avalanche 64-bit mix.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A derivation-tree key for random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngKey(u64);

impl RngKey {
    pub fn from_seed(seed: u64) -> Self {
        RngKey(mix64(seed))
    }

    /// Derive a child key. Children with different tags are independent streams.
    pub fn child(self, tag: u64) -> Self {
        RngKey(mix64(self.0 ^ mix64(tag)))
    }

    /// Instantiate the stream for this key.
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// Draw `k` distinct indices from `0..population`, uniformly without replacement.
///
/// The returned order is the draw order; `k == population` yields a uniform
/// permutation.
pub fn sample_without_replacement(
    rng: &mut ChaCha8Rng,
    population: usize,
    k: usize,
) -> Vec<usize> {
    assert!(k <= population, "requested {k} from population {population}");
    if k * 2 >= population {
        // Partial Fisher-Yates.
        let mut v: Vec<usize> = (0..population).collect();
        for i in 0..k {
            let j = rng.random_range(i..population);
            v.swap(i, j);
        }
        v.truncate(k);
        v
    } else {
        // Rejection sampling; cheaper when k is small relative to the population.
        let mut seen = std::collections::HashSet::with_capacity(k * 2);
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let c = rng.random_range(0..population);
            if seen.insert(c) {
                out.push(c);
            }
        }
        out
    }
}
