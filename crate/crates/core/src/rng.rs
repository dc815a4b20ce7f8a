//! Seed management.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` stream. Child
//! seeds are derived from a root seed and a purpose label with SplitMix64
//! over an FNV-1a hash of the label, so the same `(root, purpose, index)`
//! triple yields the same stream on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed for `purpose` / `index` from a root seed.
pub fn derive_seed(root: u64, purpose: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(purpose)).wrapping_add(index))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(root: u64, purpose: &str, index: u64) -> Rng {
    rng_from_seed(derive_seed(root, purpose, index))
}
