//! Deterministic seed derivation for independent rng streams.
//!
//! Every parallel work item (instance, config, repetition) owns its own
//! stream derived from a root seed and its identifiers, so results do not
//! depend on thread scheduling or iteration order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Fold a root seed and a path of identifiers into one stream seed.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    let mut acc = splitmix64(root);
    for &p in path {
        acc = splitmix64(acc ^ splitmix64(p));
    }
    acc
}

/// Seeded rng for a derived stream.
pub fn derive_rng(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}

/// Seeded rng from a bare seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
