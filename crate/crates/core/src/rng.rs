//! Seeded random streams.
//!
//! Every stochastic routine takes a `u64` seed and builds a [`ChaCha8Rng`] from
//! it, so results do not depend on platform or thread scheduling. Parallel
//! tasks get child seeds from [`derive_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Child seed for task `index` of a job seeded with `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn child_seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(42, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<u64> = rng_from_seed(9).sample_iter(rand::distributions::Standard).take(8).collect();
        let b: Vec<u64> = rng_from_seed(9).sample_iter(rand::distributions::Standard).take(8).collect();
        assert_eq!(a, b);
    }
}
