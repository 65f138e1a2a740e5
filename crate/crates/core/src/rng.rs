//! Reproducible random streams addressed by `(member, layer, role)`.
//!
//! A ChaCha8 key is derived from the master seed; the member index selects
//! the 64-bit stream (nonce) and `(layer, role)` selects a disjoint window of
//! the block counter. Any stream can be opened directly, so results do not
//! depend on execution order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// What a stream is used for within one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Initial preactivations (layer 0 only).
    Init = 0,
    /// Explicit weight matrix.
    Weights = 1,
    /// Explicit bias vector.
    Biases = 2,
    /// Conditional Gaussian increments.
    Increments = 3,
}

const ROLES: u128 = 4;
// Each (layer, role) window holds 2^36 32-bit words.
const WINDOW_BITS: u32 = 36;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPolicy {
    pub master_seed: u64,
}

impl SeedPolicy {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    fn key(&self) -> [u8; 32] {
        // SplitMix64 expansion of the master seed into a 256-bit key.
        let mut state = self.master_seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            chunk.copy_from_slice(&z.to_le_bytes());
        }
        key
    }

    /// Generator positioned at the start of the `(member, layer, role)` window.
    pub fn stream(&self, member: u64, layer: usize, role: Role) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key());
        rng.set_stream(member);
        rng.set_word_pos(((layer as u128) * ROLES + role as u128) << WINDOW_BITS);
        rng
    }

    /// Reusable stream opener that derives the key once.
    pub fn streams(&self) -> Streams {
        Streams {
            base: ChaCha8Rng::from_seed(self.key()),
        }
    }
}

/// Opens streams from a pre-derived key.
#[derive(Debug, Clone)]
pub struct Streams {
    base: ChaCha8Rng,
}

impl Streams {
    pub fn open(&self, member: u64, layer: usize, role: Role) -> ChaCha8Rng {
        let mut rng = self.base.clone();
        rng.set_stream(member);
        rng.set_word_pos(((layer as u128) * ROLES + role as u128) << WINDOW_BITS);
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let seeds = SeedPolicy::new(7);
        let a: Vec<u64> = (0..4).map(|_| 0).scan(seeds.stream(3, 5, Role::Increments), |r, _| Some(r.random())).collect();
        let b: Vec<u64> = (0..4).map(|_| 0).scan(seeds.streams().open(3, 5, Role::Increments), |r, _| Some(r.random())).collect();
        assert_eq!(a, b);
        let first = |m, l, role| seeds.stream(m, l, role).random::<u64>();
        let base = first(3, 5, Role::Increments);
        assert_ne!(base, first(4, 5, Role::Increments));
        assert_ne!(base, first(3, 6, Role::Increments));
        assert_ne!(base, first(3, 5, Role::Weights));
        assert_ne!(base, SeedPolicy::new(8).stream(3, 5, Role::Increments).random::<u64>());
    }
}
