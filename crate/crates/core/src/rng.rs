//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator whose 256-bit
//! key is a SplitMix64 expansion of `(seed, tags...)`. Tags identify the
//! purpose and coordinates of the draw (sample id, modality, attempt, ...), so
//! independent streams never share state and results do not depend on the
//! order in which work items are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

/// Purpose tags kept distinct so that streams never collide across subsystems.
pub mod tag {
    pub const LATENT: u64 = 0x11;
    pub const MIXER: u64 = 0x12;
    pub const LABEL_READOUT: u64 = 0x13;
    pub const LABEL_NOISE: u64 = 0x14;
    pub const AUGMENT: u64 = 0x15;
    pub const INIT: u64 = 0x16;
    pub const SHUFFLE: u64 = 0x17;
    pub const CHANNEL: u64 = 0x18;
    pub const SNR: u64 = 0x19;
    pub const SPLIT: u64 = 0x1a;
    pub const CHAIN: u64 = 0x1b;
    pub const PROBE: u64 = 0x1c;
}

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds the generator for `(seed, tags)`.
pub fn stream(seed: u64, tags: &[u64]) -> StreamRng {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    let mut key = [0u8; 32];
    let mut s = h;
    for chunk in key.chunks_exact_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[inline]
pub fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
