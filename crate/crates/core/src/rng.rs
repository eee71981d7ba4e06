//! Seeded randomness. Every stochastic draw in the crate goes through a
//! ChaCha8 generator built here, so runs are reproducible from `(seed, stream)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator for `(master, stream)`; used for per-trial and
/// per-purpose streams so that results do not depend on evaluation order.
pub fn stream_rng(master: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

/// A derived 64-bit seed for `(master, stream)`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    stream_rng(master, stream).random()
}

/// Named sub-streams used inside one solver run or trial.
pub mod streams {
    pub const CHAIN_INIT: u64 = 1;
    pub const KERNEL_INIT: u64 = 2;
    pub const TRUTH: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const OPERATOR: u64 = 5;
    pub const SPIKE: u64 = 6;
    pub const PRIOR: u64 = 7;
}

pub fn standard_normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}
