//! Deterministic seed substreams.
//!
//! Every random draw in the crate flows from a master seed through
//! [`substream`], keyed by the position of the task (replicate, equation,
//! fold, ...). Tasks therefore see identical randomness regardless of the
//! order in which a thread pool schedules them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `master` and an ordered list of keys.
pub fn substream(master: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(mix(master), |acc, &k| mix(acc ^ mix(k.wrapping_add(0xA5A5_A5A5))))
}

pub fn rng(master: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream(master, keys))
}

/// Stream tags, so that different consumers of the same `(seed, index)`
/// never share draws.
pub(crate) mod tag {
    pub const STAGE_ONE: u64 = 1;
    pub const STAGE_TWO: u64 = 2;
    pub const BOOTSTRAP_ROWS: u64 = 3;
    pub const BOOTSTRAP_FIT: u64 = 4;
    pub const NETWORK: u64 = 5;
    pub const DATASET: u64 = 6;
    pub const FIT: u64 = 7;
}
