//! Named random streams derived from one run seed, so that variants run
//! with the same seed see the same data, initialization, and batch order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Batch = 3,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Seed for a sub-component, e.g. the data generator, derived from the
/// run seed and a stream.
pub fn derived_seed(seed: u64, which: Stream) -> u64 {
    use rand::RngCore;
    stream(seed, which).next_u64()
}
