//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by
//! `(seed, domain, sub)` and selected by a per-item index. Results therefore
//! do not depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Each consumer of randomness uses its own domain so that
/// equal seeds in different roles never share draws.
pub mod domain {
    pub const INTERPOLANT: u64 = 0x01;
    pub const MIXTURE: u64 = 0x02;
    pub const SAMPLER_NOISE: u64 = 0x03;
    pub const MONTE_CARLO: u64 = 0x04;
    pub const TRAINING: u64 = 0x05;
    pub const INIT_WEIGHTS: u64 = 0x06;
    pub const DATASET: u64 = 0x07;
    pub const COUPLING: u64 = 0x08;
    pub const EXPERIMENT: u64 = 0x09;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a list of labels into a new 64-bit seed.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    let mut state = seed;
    let mut out = splitmix64(&mut state);
    for &label in labels {
        state ^= label.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        out ^= splitmix64(&mut state);
    }
    out
}

/// Key for a family of streams; cheap to turn into per-index generators.
#[derive(Debug, Clone, Copy)]
pub struct StreamKey {
    key: [u8; 32],
}

impl StreamKey {
    pub fn new(seed: u64, domain: u64, sub: u64) -> Self {
        let mut state = derive_seed(seed, &[domain, sub]);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self { key }
    }

    /// Generator for item `index` of this family.
    pub fn stream(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(index);
        rng
    }
}

/// Shorthand for `StreamKey::new(seed, domain, sub).stream(index)`.
pub fn stream(seed: u64, domain: u64, sub: u64, index: u64) -> ChaCha8Rng {
    StreamKey::new(seed, domain, sub).stream(index)
}
