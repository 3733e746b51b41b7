//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit [`Stream`]. Streams are
//! ChaCha8 generators keyed by a 64-bit seed; child streams are derived by
//! mixing a label into the parent seed so that the same (seed, label path)
//! always yields the same sequence regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the child stream `label` under `seed`.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    mix(mix(seed) ^ label.rotate_left(17) ^ 0xA076_1D64_78BD_642F)
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream reached from `seed` by following `path` one label at a time.
pub fn stream_at(seed: u64, path: &[u64]) -> Stream {
    stream(path.iter().fold(seed, |s, &l| derive_seed(s, l)))
}
