//! Seed derivation. Every random draw in a run comes from a generator seeded
//! by the run seed plus a purpose-specific path, so no generator state has
//! to be carried across checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// Purpose tags for [`derive_seed`] paths.
pub mod purpose {
    pub const SHUFFLE: u64 = 1;
    pub const REPLAY: u64 = 2;
    pub const RETAIN: u64 = 3;
    pub const POOL_INIT: u64 = 4;
    pub const HEAD_INIT: u64 = 5;
    pub const BACKBONE_INIT: u64 = 6;
    pub const STREAM: u64 = 7;
    pub const PROTOTYPE: u64 = 8;
    pub const NOISE: u64 = 9;
    pub const DOMAIN: u64 = 10;
}
