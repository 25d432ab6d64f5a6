//! Seeded random-number streams.
//!
//! A single master seed expands into named sub-streams (`data`, `init`,
//! `stage1`, `stage2`, `eval`, ...) so that adding iterations to one phase of
//! a run never perturbs the draws of another. Per-sample streams are derived
//! from a named stream by counter splitting, which keeps batch evaluation
//! order-independent: sample `k` sees the same noise whether the batch is
//! processed serially or in parallel.
//!
//! Gaussian variates use the Box-Muller transform rather than an external
//! sampler so the exact bit stream is pinned by this crate alone.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Named sub-stream of a master seed.
pub fn stream(master: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(master ^ fnv1a64(name.as_bytes())))
}

/// Counter-split sub-stream, e.g. one per sample or per iteration.
pub fn substream(master: u64, name: &str, index: u64) -> ChaCha8Rng {
    let base = splitmix64(master ^ fnv1a64(name.as_bytes()));
    ChaCha8Rng::seed_from_u64(splitmix64(base ^ index.wrapping_mul(0xa076_1d64_78bd_642f)))
}

/// One standard normal variate (Box-Muller, cosine branch).
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // 1 - gen() maps [0,1) onto (0,1] so the log is always finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A vector of independent standard normal variates.
pub fn normal_vec<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| standard_normal(rng)).collect()
}
