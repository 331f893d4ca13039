//! Seeded counter-based random number generation.
//!
//! Every stochastic operation in the workspace takes an explicit `&mut Rng`,
//! so a run is fully determined by its seed.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

/// ChaCha8 keystream generator.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a named sub-task.
pub fn fork(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}
