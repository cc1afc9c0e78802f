//! Seed discipline: one master seed fans out to named substreams.
//!
//! Every consumer of randomness (environment resets, weight init, replay
//! sampling, GAN latents, epsilon-greedy draws, ...) gets its own stream
//! derived from `(master seed, stream name, index)`. Adding or reordering
//! draws in one consumer never perturbs another, which is what makes
//! interrupted-and-resumed runs bit-identical to uninterrupted ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG used everywhere in the crate.
pub type Rng = ChaCha8Rng;

/// FNV-1a over bytes. Stable across platforms and releases, unlike
/// `std::hash::DefaultHasher`.
fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A named point in the seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(master: u64) -> Self {
        SeedStream(master)
    }

    /// Child stream for a named consumer.
    pub fn named(&self, name: &str) -> SeedStream {
        SeedStream(fnv1a(name.as_bytes(), self.0))
    }

    /// Child stream for an indexed consumer (task index, episode index, ...).
    pub fn indexed(&self, index: u64) -> SeedStream {
        SeedStream(fnv1a(&index.to_le_bytes(), self.0.rotate_left(17)))
    }

    pub fn rng(&self) -> Rng {
        Rng::seed_from_u64(self.0)
    }

    pub fn raw(&self) -> u64 {
        self.0
    }
}
