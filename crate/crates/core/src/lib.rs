//! Zero-shot inference of what a visual searcher is looking for, from the
//! fixations they made on non-target objects.

pub mod baselines;
pub mod convnet;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod runner;
pub mod synthgen;
pub mod tensor;

pub use error::{Error, Result};

/// Derives an independent stream seed (splitmix64 finalizer).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
