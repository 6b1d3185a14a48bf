//! Portable seeded randomness.
//!
//! Every random choice in the crate (split sampling, projection matrices,
//! mock tiles) is drawn from ChaCha8 seeded through `SeedableRng::seed_from_u64`
//! and consumed only through the helpers here, which are defined on raw
//! `next_u64` output. Results are therefore identical on every platform and do
//! not depend on the sampling algorithms of any particular `rand` release.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub type PortableRng = ChaCha8Rng;

/// Generator for `seed`, switched to the independent ChaCha stream `stream`.
pub fn stream(seed: u64, stream: u64) -> PortableRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform integer in `0..n` by rejection sampling. `n` must be positive.
pub fn uniform_index(rng: &mut PortableRng, n: usize) -> usize {
    assert!(n > 0, "uniform_index over an empty range");
    let n = n as u64;
    // Largest multiple of n that fits; values at or above it are redrawn.
    let zone = u64::MAX - (u64::MAX % n + 1) % n;
    loop {
        let v = rng.next_u64();
        if v <= zone {
            return (v % n) as usize;
        }
    }
}

/// Uniform float in `[0, 1)` with 53 bits of precision.
pub fn unit_f64(rng: &mut PortableRng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal sample via Box-Muller (cosine branch only).
pub fn gaussian(rng: &mut PortableRng) -> f64 {
    // 1 - u lies in (0, 1], so the log is finite.
    let u1 = 1.0 - unit_f64(rng);
    let u2 = unit_f64(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
