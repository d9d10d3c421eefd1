//! Seeded random streams.
//!
//! Every random draw in the crate goes through ChaCha8 so results are
//! reproducible across platforms. Independent streams (one per tree, per
//! boosting iteration, per phantom component) are keyed as `seed ^ index`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index)
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
