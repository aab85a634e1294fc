//! Deterministic RNG streams.
//!
//! Every random draw in training is taken from a stream keyed by
//! `(seed, epoch, step, purpose, index)`, so the order in which clips are
//! loaded or processed in parallel never changes which numbers a clip sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Init,
    Shuffle,
    Mask,
    Dropout,
    Synth,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x1111,
            Purpose::Shuffle => 0x2222,
            Purpose::Mask => 0x3333,
            Purpose::Dropout => 0x4444,
            Purpose::Synth => 0x5555,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn stream_seed(seed: u64, epoch: u64, step: u64, purpose: Purpose, index: u64) -> u64 {
    [epoch, step, purpose.tag(), index]
        .into_iter()
        .fold(splitmix64(seed), |acc, part| splitmix64(acc ^ splitmix64(part)))
}

pub fn stream(seed: u64, epoch: u64, step: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, epoch, step, purpose, index))
}
