//! Multi-task open-vocabulary visual question answering at desk scale.
//!
//! This crate is `no_std` (it needs `alloc`) and holds everything that is
//! pure computation: a small dense tensor engine with reverse-mode
//! differentiation, the concatenation-fusion encoder/decoder model, the
//! caption-derived pretraining tasks, the synthetic scene world with its
//! question families, the equal-share mixture trainer and the
//! open-vocabulary metrics. File formats, experiment protocols and the CLI
//! live in the `answerme` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod graph;
pub mod math;
pub mod metrics;
pub mod mixture;
pub mod model;
pub mod optim;
pub mod params;
pub mod raster;
pub mod synth;
pub mod tasks;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

/// Deterministic generator used everywhere a seed is accepted.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from a seed.
pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream index so sub-generators stay independent.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined word
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a, used for stable content fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
