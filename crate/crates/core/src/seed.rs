//! Deterministic derivation of independent RNG streams.
//!
//! Every random choice in the simulator is drawn from a `ChaCha8Rng` seeded
//! through these helpers, so a single experiment seed fans out into
//! reproducible, well-separated streams (backbone weights, task geometry,
//! per-client samplers, per-round shuffles). ChaCha's output is specified
//! byte-for-byte, which keeps runs bitwise reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// Mix a salt into a seed with the splitmix64 finalizer.
///
/// Used to derive per-index streams, e.g. per-client sampler seeds from a
/// federation base seed.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(GOLDEN_GAMMA);
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a named sub-stream of a seed, e.g. `stream(seed, "backbone")`.
///
/// The label is hashed with FNV-1a so stream identities are stable strings
/// rather than magic integers.
pub fn stream(seed: u64, label: &str) -> u64 {
    mix(seed, fnv1a(label))
}

/// Build the deterministic generator used throughout the crate.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn fnv1a(text: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for byte in text.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
