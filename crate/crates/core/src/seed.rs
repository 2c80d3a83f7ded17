//! Seed streams. Every random draw in a run comes from a ChaCha stream whose
//! seed is derived from the master seed and a path of integers, so parallel
//! workers never share a stream and results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &p| {
        splitmix64(acc.rotate_left(17) ^ splitmix64(p))
    })
}

pub fn rng_for(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

/// Stream tags, kept distinct so that e.g. the duration table and the
/// dataset sampler never draw from the same stream.
pub mod tag {
    pub const POLICY_INIT: u64 = 1;
    pub const DURATIONS: u64 = 2;
    pub const JITTER: u64 = 3;
    pub const SELF_GEN: u64 = 4;
    pub const SFT_SHUFFLE: u64 = 5;
    pub const GRPO_PROMPTS: u64 = 6;
    pub const GRPO_ROLLOUTS: u64 = 7;
    pub const GRPO_SFT_BATCH: u64 = 8;
    pub const EVAL_TARGETS: u64 = 9;
    pub const EVAL_ROLLOUTS: u64 = 10;
}
