//! Seeded randomness source.
//!
//! Every random draw in the simulator goes through [`SimRng`] so that a run
//! is fully determined by its seed. The stream is ChaCha20-based; it is
//! cryptographically strong enough for simulated key material while staying
//! reproducible.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

/// Deterministic randomness source for a simulation run.
#[derive(Debug, Clone)]
pub struct SimRng {
    inner: ChaCha20Rng,
}

impl SimRng {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Derives an independent child stream, e.g. one per actor, so that
    /// adding draws in one component does not shift another's stream.
    pub fn fork(&mut self, label: &str) -> Self {
        let mut seed = [0u8; 32];
        self.inner.fill_bytes(&mut seed);
        let mut mixed = [0u8; 32];
        let digest = crate::crypto::kdf::hmac_sha256(&seed, label.as_bytes());
        mixed.copy_from_slice(&digest);
        Self {
            inner: ChaCha20Rng::from_seed(mixed),
        }
    }

    pub fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest);
    }

    pub fn bytes<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        self.inner.fill_bytes(&mut out);
        out
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform value in `[0, bound)`. `bound` must be non-zero.
    pub fn below(&mut self, bound: u64) -> u64 {
        // Rejection sampling keeps the distribution exact.
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }
}
