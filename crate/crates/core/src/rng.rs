//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha8 stream derived from a
//! master seed, a component label and an index, so results do not depend on
//! the order in which components consume randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream `(label, index)` under `master`.
pub fn stream(master: u64, label: u64, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(splitmix64(label.wrapping_mul(0x1000_0000_01b3) ^ splitmix64(index)));
    rng
}
