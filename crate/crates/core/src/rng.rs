//! Seeded generators. Every stochastic routine takes an explicit seed; there is no global RNG.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mix `base` and a stream tag into an independent-looking seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream tags for [`derive_seed`].
pub(crate) mod stream {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const DATA: u64 = 5;
    pub const COMPANION: u64 = 6;
}
