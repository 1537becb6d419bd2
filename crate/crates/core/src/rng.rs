//! Reproducible random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by
//! `(master seed, replicate index, stream role)`. The key expands to the
//! 256-bit ChaCha seed and the role selects the ChaCha stream, so two
//! distinct keys never share keystream blocks and any replicate can be
//! regenerated in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Purpose of a random stream. Distinct roles of the same replicate are
/// independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamRole {
    Hawkes,
    MicroBook,
    LimitNoise,
    Cir,
    Clustering,
    Bootstrap,
    Custom(u32),
}

impl StreamRole {
    fn id(self) -> u64 {
        match self {
            StreamRole::Hawkes => 1,
            StreamRole::MicroBook => 2,
            StreamRole::LimitNoise => 3,
            StreamRole::Cir => 4,
            StreamRole::Clustering => 5,
            StreamRole::Bootstrap => 6,
            StreamRole::Custom(k) => 0x1_0000_0000 | u64::from(k),
        }
    }
}

/// Identifies one random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub replicate: u64,
    pub role: StreamRole,
}

impl StreamKey {
    pub fn new(seed: u64, replicate: u64, role: StreamRole) -> Self {
        Self { seed, replicate, role }
    }

    /// Derived 64-bit seed, recorded in seed manifests.
    pub fn derived_seed(&self) -> u64 {
        let mut s = self.seed ^ 0x6a09_e667_f3bc_c908;
        let a = splitmix64(&mut s);
        let mut t = a ^ self.replicate.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let b = splitmix64(&mut t);
        b ^ self.role.id().wrapping_mul(0xbf58_476d_1ce4_e5b9)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut state = self.seed;
        let mut bytes = [0u8; 32];
        let mut mix = self.replicate;
        for chunk in bytes.chunks_exact_mut(8) {
            let v = splitmix64(&mut state) ^ splitmix64(&mut mix);
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(bytes);
        rng.set_stream(self.role.id());
        rng
    }
}

/// Shorthand for `StreamKey::new(seed, replicate, role).rng()`.
pub fn stream(seed: u64, replicate: u64, role: StreamRole) -> ChaCha8Rng {
    StreamKey::new(seed, replicate, role).rng()
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
