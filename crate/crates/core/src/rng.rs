//! Seeded random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream whose
//! 64-bit seed is derived from a master seed and a short path of integer
//! labels (purpose, stage, frame, ...). Derivation is a splitmix64 fold, so
//! any worker can reconstruct the stream it needs without coordination.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifier recorded in reports so draws can be replicated elsewhere.
pub const RNG_ALGORITHM: &str = "chacha8/splitmix64-derive";

pub type Rng = ChaCha8Rng;

/// Stream labels, kept distinct so that no two purposes share a stream.
pub mod label {
    pub const TRAINABLE_INIT: u64 = 1;
    pub const BIG_CODEBOOK: u64 = 2;
    pub const PROJECTION: u64 = 3;
    pub const SAMPLING: u64 = 4;
    pub const FRAME: u64 = 5;
    pub const BATCH: u64 = 6;
    pub const FIXED: u64 = 7;
    pub const SHUFFLE: u64 = 8;
    pub const DATA: u64 = 9;
    pub const CALIBRATION: u64 = 10;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a path of labels into a child seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Generator for `path` under `master`.
pub fn stream(master: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

/// Generator seeded directly, with no derivation.
pub fn from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
