//! A desk-scale search engine for structured dropout patterns.
//!
//! The crate synthesizes tiled, geometrically transformed dropout masks for
//! convolutional and attention networks, trains an autoregressive controller
//! over mask hyper-parameters with REINFORCE (importance-sampled to tolerate
//! stale asynchronous rewards), and orchestrates the search with a two-queue
//! scheduler that runs either on live worker threads or on a deterministic
//! simulated availability trace.

pub mod controller;
pub mod error;
pub mod harness;
pub mod mask;
pub mod reward;
pub mod scheduler;
pub mod space;
pub mod tensor;

pub use error::{Error, Result};

/// Cheap stateless seed mixer used to derive independent RNG streams
/// (per-job evaluator seeds, simulation clock, mask draws) from one root seed.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
