//! Seeded random streams with exactly restorable state.
//!
//! Every stochastic step in the crate (initialization, shuffling, negative
//! sampling, dropout, synthetic data) draws from a `SeedableStream` so that a
//! (seed, config, data) triple fixes the whole run. Checkpoints persist the
//! (seed, word position) pair, which restores the stream bit-exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeedableStream = ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

pub fn seeded(seed: u64) -> SeedableStream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministically derives a child seed from a parent seed and a label.
/// SplitMix64 over the xor of the parts; used to give independent streams to
/// sub-tasks (per-scene noise, per-edge noise) without sharing a cursor.
pub fn derive_seed(parent: u64, label: u64) -> u64 {
    let mut z = parent ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn capture(rng: &SeedableStream) -> RngState {
    RngState {
        seed: rng.get_seed(),
        word_pos: rng.get_word_pos(),
    }
}

pub fn restore(state: &RngState) -> SeedableStream {
    let mut rng = ChaCha8Rng::from_seed(state.seed);
    rng.set_word_pos(state.word_pos);
    rng
}
