//! Counter-based random substreams.
//!
//! Every random draw in the lab comes from a ChaCha stream keyed by the
//! experiment seed plus a tuple of counters (span, batch, view, record ...).
//! Nothing carries hidden generator state between steps, so resuming a run
//! only needs the seed and the position counters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Domain tags keep substreams used for different purposes disjoint.
pub mod domain {
    pub const INIT: u64 = 0x01;
    pub const STABLE: u64 = 0x02;
    pub const VARYING: u64 = 0x03;
    pub const MIXING: u64 = 0x04;
    pub const ENTITY_SPAN: u64 = 0x05;
    pub const RECORD: u64 = 0x06;
    pub const SHUFFLE: u64 = 0x07;
    pub const AUGMENT: u64 = 0x08;
    pub const LATENT: u64 = 0x09;
    pub const GLOBAL: u64 = 0x0a;
    pub const PROBE: u64 = 0x0b;
    pub const INTERACTIONS: u64 = 0x0c;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic generator for `(seed, keys...)`.
pub fn substream(seed: u64, keys: &[u64]) -> Rng {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &k in keys {
        state ^= k.wrapping_mul(0xff51_afd7_ed55_8ccd);
        acc ^= splitmix64(&mut state);
        state = state.rotate_left(17) ^ acc;
    }
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
