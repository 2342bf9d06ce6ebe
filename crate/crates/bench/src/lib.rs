//! Shared inputs for the benchmarks.

use dycklab::dyck::{Sampler, SamplerConfig, Token};

/// `count` members of `Dyck_{k,D}` with interior lengths in `lo..=hi`.
pub fn members(k: u32, depth: u32, lo: usize, hi: usize, count: usize) -> Vec<Vec<Token>> {
    let cfg = SamplerConfig::new(k, depth, lo, hi).expect("feasible length range");
    Sampler::new(cfg, 1).expect("sampler").take(count).collect()
}
