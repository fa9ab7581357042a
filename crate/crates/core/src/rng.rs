//! Deterministic stream derivation for parallel sampler stages.
//!
//! Every random draw in a sampler run comes from a `ChaCha8` stream whose key
//! is derived from `(master seed, stage tag, indices...)`. Derivation needs no
//! shared state, so per-particle streams can be created inside parallel loops
//! and the run reproduces exactly regardless of thread count or scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags keep streams for different pipeline phases disjoint.
pub mod stage {
    pub const INIT: u64 = 1;
    pub const RESAMPLE: u64 = 2;
    pub const REJUVENATE: u64 = 3;
    pub const SPAWN: u64 = 4;
    pub const WARMUP: u64 = 5;
    pub const PRODUCTION: u64 = 6;
    pub const METRICS: u64 = 7;
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent generator from a master seed and a stream path.
///
/// Distinct paths give independent streams; identical paths give identical
/// streams. Typical use: `derive(seed, &[stage::REJUVENATE, step, particle])`.
pub fn derive(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x6a09_e667_f3bc_c908;
    let _ = splitmix64(&mut state);
    for &tag in path {
        state ^= splitmix64(&mut (tag ^ 0x243f_6a88_85a3_08d3));
        let _ = splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
