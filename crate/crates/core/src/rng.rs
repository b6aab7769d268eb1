//! Seed handling for parallel Monte Carlo.
//!
//! Replicate `k` of a run with master seed `s` always draws from the same
//! stream, no matter how replicates are scheduled across threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Stream for the "main" draw of a run (replicate index 0 is reserved).
pub fn master(seed: u64) -> Rng {
    replicate(seed, 0)
}

/// Independent stream for replicate `k` of a run seeded with `seed`.
pub fn replicate(seed: u64, k: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // ChaCha streams are independent by construction; stream 0 is the master.
    rng.set_stream(k.wrapping_add(1));
    rng
}
