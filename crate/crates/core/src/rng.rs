//! Seeded randomness. Every stochastic step in the crate draws from a
//! [`ChaCha8Rng`] derived from an explicit seed.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// An independent stream for shard `shard` of a run seeded with `seed`.
pub fn stream(seed: u64, shard: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shard.wrapping_add(1));
    rng
}
