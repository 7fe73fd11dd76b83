//! Seed derivation. Every stochastic stage draws from its own ChaCha stream
//! keyed by `(base seed, stream tag, index)`, so adding draws in one stage
//! never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    PretrainBatches = 2,
    TrainBatches = 3,
    ShapTargets = 4,
    ShapBackground = 5,
    ShapPaths = 6,
    Synth = 7,
    Noise = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream as u64) ^ index)
}

pub fn rng(base: u64, stream: Stream, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(base, stream, index))
}
