//! The single pseudorandom generator used across the crate.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Name recorded alongside every seed so datasets can be regenerated elsewhere.
pub const ALGORITHM: &str = "chacha12/rand_chacha-0.3/v1";

pub type Rng = ChaCha12Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Independent stream `stream` derived from `seed`.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha12Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn normal(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}

pub fn normals(r: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(r)).collect()
}
