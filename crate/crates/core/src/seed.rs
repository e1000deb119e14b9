//! Deterministic seed derivation.
//!
//! Every independent unit of work (a dataset sample, an evaluation trial, a
//! simulated device) gets its own stream derived from the run's master seed,
//! so results do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used throughout the crate. ChaCha8 keeps streams stable across
/// platforms and `rand` releases.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a master seed with a path of stream indices.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Stream tags, so that e.g. sample 3 and trial 3 never share a seed.
pub mod stream {
    pub const DATASET_SAMPLE: u64 = 1;
    pub const DATASET_SPLIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const FINETUNE: u64 = 4;
    pub const ONE_SHOT: u64 = 5;
    pub const WAV: u64 = 6;
    pub const DELAY: u64 = 7;
    pub const SWITCHING_CURVE: u64 = 8;
}
