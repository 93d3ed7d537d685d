//! Seed derivation.
//!
//! Every random decision in the pipeline flows from one root seed through
//! named substreams, so a run is reproducible end to end and changing one
//! consumer (say, the shuffle order) cannot perturb another (say, parameter
//! init).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 mixing step. Small, stable, and good enough for stream keying.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a substream seed from a root seed and a label.
pub fn substream(root: u64, label: &str) -> u64 {
    let mut state = splitmix64(root ^ 0x5851_f42d_4c95_7f2d);
    for &b in label.as_bytes() {
        state = splitmix64(state ^ u64::from(b));
    }
    state
}

/// Derives a substream seed keyed by a label plus an integer index
/// (epoch, fold, tensor ordinal, ...).
pub fn substream_indexed(root: u64, label: &str, index: u64) -> u64 {
    splitmix64(substream(root, label) ^ index)
}

/// Deterministic RNG for a named substream.
pub fn stream_rng(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream(root, label))
}

/// Deterministic RNG for a named, indexed substream.
pub fn stream_rng_indexed(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_indexed(root, label, index))
}

/// Counter-based uniform value in [0, 1) for position `i` of the stream
/// identified by `key`. Stateless: callers may evaluate positions in any
/// order (or in parallel) and always get the same value.
pub fn counter_uniform(key: u64, i: u64) -> f64 {
    let bits = splitmix64(key ^ splitmix64(i));
    // 53 high bits -> [0,1) double.
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
