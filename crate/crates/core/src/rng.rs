//! Seed derivation. Every random stream in a run is a ChaCha8 generator keyed
//! by the run seed and a stream tag, so adding a consumer never perturbs the
//! draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags used by the pipeline.
pub mod stream {
    pub const SIMULATION: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const PRETRAIN: u64 = 4;
    pub const FINETUNE: u64 = 5;
    pub const SELECT: u64 = 6;
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    mix(mix(mix(seed) ^ tag) ^ index)
}

pub fn stream_rng(seed: u64, tag: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, tag, index))
}
