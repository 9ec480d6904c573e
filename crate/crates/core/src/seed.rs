//! Seed lineage.
//!
//! Every random draw in the crate is keyed by a seed derived from the run's
//! base seed and a path of integer tags (iteration, direction, sign, scenario
//! and so on). Nothing is keyed by thread or worker identity, so results do
//! not depend on how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and a tag path.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(base), |acc, &tag| splitmix(acc ^ splitmix(tag)))
}

/// Stable 64-bit tag for a string (FNV-1a), used to key per-scenario seeds
/// by identity rather than list position.
pub fn tag(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tags))
}

/// Stream tags, kept distinct so unrelated draws never share a seed.
pub mod stream {
    pub const DIRECTIONS: u64 = 1;
    pub const ROLLOUT: u64 = 2;
    pub const SCENARIO_SHUFFLE: u64 = 3;
    pub const BO: u64 = 4;
    pub const ENV_SAMPLE: u64 = 5;
    pub const CONTINGENCY_SAMPLE: u64 = 6;
    pub const INIT: u64 = 7;
    pub const OBS_NOISE: u64 = 8;
    pub const EVAL: u64 = 9;
}
