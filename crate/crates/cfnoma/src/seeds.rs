//! Deterministic seed derivation.
//!
//! Every random draw in the pipeline comes from a ChaCha stream derived from
//! `(master seed, scenario index, topology index, stream tag)`, so adding
//! sweep points or reordering work never perturbs existing rows.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; stable across platforms and releases.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one (scenario, topology) cell.
pub fn derive(master: u64, scenario: u64, topology: u64) -> u64 {
    let a = splitmix64(master ^ 0xa076_1d64_78bd_642f);
    let b = splitmix64(a ^ scenario);
    splitmix64(b ^ topology)
}

/// Independent stream within a derived seed (topology, shadowing, clustering
/// init, Monte Carlo blocks, ...).
pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(tag)))
}

/// Stream tags, one per consumer of randomness.
pub mod tags {
    pub const TOPOLOGY: u64 = 1;
    pub const SHADOWING: u64 = 2;
    pub const KMEANS_INIT: u64 = 3;
    pub const PAIRING: u64 = 4;
    pub const MC_BLOCK_BASE: u64 = 0x1000;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derivation_is_stable_and_decorrelated() {
        let a = derive(42, 0, 0);
        let b = derive(42, 0, 1);
        let c = derive(42, 1, 0);
        assert_eq!(a, derive(42, 0, 0));
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(b, c);
    }

    #[test]
    fn streams_differ_by_tag() {
        let mut r1 = stream(7, tags::TOPOLOGY);
        let mut r2 = stream(7, tags::SHADOWING);
        assert_ne!(r1.next_u64(), r2.next_u64());
    }
}
