//! Seed-deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream addressed by
//! `(master seed, purpose, index)`. Paths use their path index, reservoirs
//! their backward step and role, so the draws do not depend on the order in
//! which work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
}

/// What a stream is used for. Distinct purposes never share key material.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Gaussian increments of one sample path.
    Path,
    /// Reservoir weights for one backward step; the index encodes step and role.
    Reservoir,
    /// Draws for the exact-covariance Volterra oracle.
    Oracle,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Path => 0x5041_5448,
            Purpose::Reservoir => 0x5245_5356,
            Purpose::Oracle => 0x4f52_434c,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedSpec {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    /// Independent namespace derived from this one, e.g. per repeat or for the
    /// reference simulation.
    pub fn child(&self, namespace: u64) -> SeedSpec {
        let mut s = self.master_seed ^ namespace.rotate_left(17) ^ 0x6a09_e667_f3bc_c909;
        let a = splitmix64(&mut s);
        let b = splitmix64(&mut s);
        SeedSpec {
            master_seed: a ^ b.rotate_left(32),
        }
    }

    /// Named child namespace.
    pub fn named(&self, name: &str) -> SeedSpec {
        // FNV-1a, stable across platforms and releases.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in name.bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.child(h)
    }

    pub fn stream(&self, purpose: Purpose, index: u64) -> ChaCha8Rng {
        let mut state = self.master_seed ^ purpose.tag().wrapping_mul(0xd6e8_feb8_6659_fd93);
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        rng
    }

    pub fn path_stream(&self, path: usize) -> ChaCha8Rng {
        self.stream(Purpose::Path, path as u64)
    }

    /// Stream for the reservoir of backward step `step`. `role` separates the
    /// two reservoirs of the non-Markovian scheme.
    pub fn reservoir_stream(&self, step: usize, role: u32) -> ChaCha8Rng {
        self.stream(Purpose::Reservoir, ((step as u64) << 8) | role as u64)
    }
}
