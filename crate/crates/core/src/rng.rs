//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by
//! `(master seed, purpose)` and selected by a 64-bit stream index, so the
//! values a sample or an iteration sees never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share key material.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Scene,
    Init,
    Flip,
    WeakPhotometric,
    StrongPhotometric,
    ShuffleSource,
    ShuffleTarget,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Scene => 1,
            Purpose::Init => 2,
            Purpose::Flip => 3,
            Purpose::WeakPhotometric => 4,
            Purpose::StrongPhotometric => 5,
            Purpose::ShuffleSource => 6,
            Purpose::ShuffleTarget => 7,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Returns the random stream for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut state = seed ^ purpose.tag().wrapping_mul(0xD6E8_FEB8_6659_FD93);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
