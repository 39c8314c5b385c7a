//! Seeded randomness. Every stochastic operation in the crate draws from a
//! `ChaCha8Rng` constructed here so runs are reproducible from a single seed.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::grid::Grid2;

pub type SeedRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed from a master seed and a stream index
/// (splitmix64 finalizer). Used to give workers and tiles their own streams.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Grid of i.i.d. standard normal draws in row-major order.
pub fn normal_field(rows: usize, cols: usize, rng: &mut SeedRng) -> Grid2<f64> {
    Grid2::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}
