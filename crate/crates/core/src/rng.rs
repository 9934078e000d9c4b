//! Deterministic seed derivation.
//!
//! One root seed is split into named streams so that initialization,
//! dropout masks, shuffling and data generation can be varied
//! independently of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named randomness streams derived from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Dropout,
    Shuffle,
    DataGen,
    Shift,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x696e_6974,
            Stream::Dropout => 0x6472_6f70,
            Stream::Shuffle => 0x7368_7566,
            Stream::DataGen => 0x6461_7461,
            Stream::Shift => 0x7368_6966,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a sequence of words.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

pub fn stream_seed(root: u64, stream: Stream) -> u64 {
    mix(&[root, stream.tag()])
}

pub fn rng_from(words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(words))
}
