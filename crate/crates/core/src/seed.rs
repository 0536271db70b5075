//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a 64-bit seed derived from a master seed and a path of tags, so
//! results are independent of thread scheduling and call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_INIT: u64 = 0x494e_4954;
pub const TAG_BATCHES: u64 = 0x4241_5443;
pub const TAG_DROPOUT: u64 = 0x4452_4f50;
pub const TAG_SHADOW: u64 = 0x5348_4144;
pub const TAG_DISCRIMINATOR: u64 = 0x4449_5343;
pub const TAG_CLASSIFIER: u64 = 0x434c_4153;
pub const TAG_NOISE: u64 = 0x4e4f_4953;
pub const TAG_SPLIT: u64 = 0x5350_4c54;
pub const TAG_SWEEP: u64 = 0x5357_4550;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `tags` into `master`, one splitmix round per tag.
pub fn derive(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
