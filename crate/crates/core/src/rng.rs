//! Named random streams derived from a single `u64` seed.
//!
//! Every subsystem draws from its own stream (`data`, `init`, `shuffle`,
//! `route`, ...), so changing how many numbers one subsystem consumes never
//! shifts the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a stream name. Stable across platforms and releases.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix(seed ^ splitmix(h))
}

/// Mixes a seed with an ordinal, e.g. a split index.
pub fn derive_indexed(seed: u64, index: u64) -> u64 {
    splitmix(splitmix(seed) ^ splitmix(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

pub fn stream(seed: u64, name: &str) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, name))
}
