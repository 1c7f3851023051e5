//! Deterministic random streams: one user seed fans out into independent,
//! stably-named sub-streams so data, init, augmentation, and replay draws
//! never interleave.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable FNV-1a hash of a stream label.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// A seeded generator for the named sub-stream of `seed`.
///
/// The same (seed, label) pair always yields the same stream on every
/// platform; distinct labels yield unrelated streams.
pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ label_hash(label))
}
