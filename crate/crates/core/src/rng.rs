//! Seed plumbing. Every random stream in the crate is a ChaCha8 generator
//! keyed by a 64-bit seed derived from the run seed plus a label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// splitmix64 finaliser.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed for a named stream.
pub fn derive(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the base seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix(seed ^ mix(h))
}

/// Seed for the `index`-th draw of a stream, e.g. training step `index`.
pub fn derive_indexed(seed: u64, label: &str, index: u64) -> u64 {
    mix(derive(seed, label) ^ mix(index.wrapping_add(1)))
}
