//! Deterministic seed derivation.
//!
//! Every randomized operation in this crate takes an explicit seed or RNG, and
//! sub-tasks (retries, per-chain streams, per-example training randomness)
//! derive their own seeds from the caller's seed through [`derive`]. Equal
//! inputs always give equal streams, independent of thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keeping unrelated derived streams disjoint.
pub mod domain {
    pub const SYNTH_RETRY: u64 = 0x01;
    pub const DATASET: u64 = 0x02;
    pub const SPLIT: u64 = 0x03;
    pub const EXAMPLE: u64 = 0x04;
    pub const VALIDATION: u64 = 0x05;
    pub const CHAIN: u64 = 0x06;
    pub const SWEEP_CELL: u64 = 0x07;
    pub const TARGET: u64 = 0x08;
    pub const EPOCH_SHUFFLE: u64 = 0x09;
}

/// SplitMix64 finalizer; good avalanche for cheap seed mixing.
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives a child seed from `(seed, domain, index)`.
pub fn derive(seed: u64, domain: u64, index: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(domain)).wrapping_add(index))
}

/// A ChaCha stream for a derived seed.
pub fn rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, domain, index))
}
