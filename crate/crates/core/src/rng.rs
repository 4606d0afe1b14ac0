//! Seeded random streams.
//!
//! Every stochastic decision in a run draws from a stream derived from the run
//! seed and a path of integers (e.g. `[round, member]`), so any schedule can be
//! reproduced without replaying the streams that precede it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream labels, keeping derived seeds of different consumers apart.
pub mod label {
    pub const ENV: u64 = 1;
    pub const UPDATE: u64 = 2;
    pub const MEMBER: u64 = 3;
    pub const ACTOR: u64 = 4;
    pub const INIT: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const BIAS: u64 = 7;
    pub const ACTION: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a path of integers into a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn seeded(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

pub fn substream(seed: u64, path: &[u64]) -> StreamRng {
    seeded(derive_seed(seed, path))
}
