//! Deterministic, splittable random streams.
//!
//! Every random quantity is drawn from a ChaCha stream keyed by
//! `(master seed, path id, stream)`, so that a given path sees identical
//! chain, common-noise and major-agent noise regardless of population size
//! or policy. This is what makes common-random-number comparisons exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Chain,
    Latent,
    Major,
    Types,
    Minor(usize),
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Chain => 1,
            Stream::Latent => 2,
            Stream::Major => 3,
            Stream::Types => 4,
            Stream::Minor(i) => 1_000 + i as u64,
        }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derive a child seed from a parent seed and a label; used to separate stages.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(label.wrapping_mul(0xD6E8_FEB8_6659_FD93)))
}

pub fn stream(seed: u64, path: usize, stream: Stream) -> ChaCha8Rng {
    let key = derive_seed(derive_seed(seed, path as u64), stream.tag());
    ChaCha8Rng::seed_from_u64(key)
}
