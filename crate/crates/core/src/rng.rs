//! Seeded randomness. Every random draw in the crate comes from a ChaCha
//! stream derived from one run seed plus a fixed stream id, so independent
//! consumers never share or reorder each other's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids for the consumers of the run seed.
pub mod stream {
    pub const SYNTH_FIELDS: u64 = 1;
    pub const SYNTH_NOISE: u64 = 2;
    pub const SYNTH_POINTS: u64 = 3;
    pub const INIT: u64 = 10;
    pub const SHUFFLE: u64 = 11;
    pub const DROPOUT: u64 = 12;
}

/// Generator for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
