//! Seed derivation for independent, order-free random streams.
//!
//! Every random quantity in the crate is drawn from a `ChaCha8Rng` whose seed
//! is derived from a root seed and a path of integer labels. Two different
//! paths give unrelated streams, so batches can be generated in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Labels separating the seed domains used across the crate.
pub mod domain {
    pub const TRAIN_INSTANCE: u64 = 0x7472_6169_6e00_0001;
    pub const TRAIN_ROLLOUT: u64 = 0x7472_6169_6e00_0002;
    pub const TEST_INSTANCE: u64 = 0x7465_7374_0000_0001;
    pub const EVAL_SAMPLE: u64 = 0x6576_616c_0000_0001;
    pub const VALIDATION: u64 = 0x7661_6c69_6400_0001;
    pub const INIT: u64 = 0x696e_6974_0000_0001;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a root seed with a path of labels into a new 64-bit seed.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

/// A generator for the stream identified by `(root, path)`.
pub fn stream(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn distinct_paths_give_distinct_seeds() {
        let a = derive_seed(7, &[1, 2]);
        let b = derive_seed(7, &[2, 1]);
        let c = derive_seed(8, &[1, 2]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, &[1, 2]));
    }

    #[test]
    fn streams_are_reproducible() {
        let x: Vec<u32> = stream(3, &[9]).sample_iter(rand::distributions::Standard).take(8).collect();
        let y: Vec<u32> = stream(3, &[9]).sample_iter(rand::distributions::Standard).take(8).collect();
        assert_eq!(x, y);
    }
}
