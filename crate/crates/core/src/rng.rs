//! Seeded random streams.
//!
//! Every random decision in the toolkit draws from a [`RandomStream`] derived
//! from a tuple of identifiers, so results never depend on call order or on
//! how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type RandomStream = ChaCha8Rng;

/// Builds a seed from an ordered tuple of parts.
///
/// Parts are length-prefixed before hashing so `("ab", "c")` and `("a", "bc")`
/// give different seeds.
#[derive(Debug, Clone, Default)]
pub struct SeedKey {
    hasher: Sha256,
}

impl SeedKey {
    pub fn new(domain: &str) -> Self {
        SeedKey::default().str(domain)
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.hasher.update([8u8]);
        self.hasher.update(v.to_le_bytes());
        self
    }

    pub fn str(mut self, s: &str) -> Self {
        self.hasher.update((s.len() as u64).to_le_bytes());
        self.hasher.update(s.as_bytes());
        self
    }

    pub fn seed(self) -> [u8; 32] {
        self.hasher.finalize().into()
    }

    pub fn stream(self) -> RandomStream {
        ChaCha8Rng::from_seed(self.seed())
    }
}

pub fn stream_from_seed(seed: u64) -> RandomStream {
    SeedKey::new("root").u64(seed).stream()
}
