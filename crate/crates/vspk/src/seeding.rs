//! Deterministic derivation of purpose-specific random streams.
//!
//! Every sampling site (splits, clip offsets, support selection, trials,
//! epoch shuffles) draws from its own stream derived from the run seed and
//! a short tag. Streams are order-independent: inserting a new sampling
//! site never perturbs the others, and two commands that need the same
//! choices (say, the support clips of one speaker) reconstruct the stream
//! from the tag alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the seed bytes then the tag bytes.
fn mix(seed: u64, tag: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes() {
        h = (h ^ b as u64).wrapping_mul(PRIME);
    }
    for b in tag.as_bytes() {
        h = (h ^ *b as u64).wrapping_mul(PRIME);
    }
    h
}

/// A generator unique to `(seed, tag)`.
pub fn sub_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tag))
}
