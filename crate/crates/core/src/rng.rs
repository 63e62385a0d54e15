//! Counter-based random substreams.
//!
//! A stream is addressed by the run seed plus a path of integer tags (method tag,
//! round, feature, ...). Two calls with the same address always produce the same
//! generator, no matter which thread asks first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod tag {
    pub const BOOTSTRAP: u64 = 1;
    pub const FEATURE_SUBSET: u64 = 2;
    pub const PERMUTE: u64 = 3;
    pub const JOINT_PERMUTE: u64 = 4;
    pub const LIME: u64 = 5;
    pub const SAGE: u64 = 6;
    pub const BACKGROUND: u64 = 7;
    pub const SAMPLE: u64 = 8;
    pub const SYNTH: u64 = 9;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a path of tags into one 64-bit key.
pub fn stream_key(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |h, &t| {
        splitmix64(h ^ splitmix64(t.wrapping_add(0xA5A5)))
    })
}

pub fn substream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, path))
}

/// Order-sensitive key for a sorted set of indices.
pub fn set_key(indices: &[usize]) -> u64 {
    indices
        .iter()
        .fold(indices.len() as u64, |h, &i| splitmix64(h ^ i as u64))
}
