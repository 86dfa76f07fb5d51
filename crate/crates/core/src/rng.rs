//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit 64-bit seed. Independent
//! sub-streams (one per record, per model, per experiment cell) are
//! separate ChaCha streams under the same key, so adding or removing one
//! consumer never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Generator for sub-stream `stream` of `seed`.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed from a parent seed and a label, for nesting
/// seeded procedures (e.g. privatization seed of experiment seed 7).
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream identifiers reserved by the library.
pub mod streams {
    /// Train/test split permutation.
    pub const SPLIT: u64 = 1 << 40;
    /// Unawareness model initialization.
    pub const UNAWARE_INIT: u64 = (1 << 40) + 1;
    /// Insurer transformation network initialization.
    pub const TRANSFORM_INIT: u64 = (1 << 40) + 2;
    /// Posterior classifier initialization used by noise estimation.
    pub const POSTERIOR_INIT: u64 = (1 << 40) + 3;
    /// Base offset for group-model initialization; model k uses `GROUP_INIT + k`.
    pub const GROUP_INIT: u64 = 1 << 41;
}
