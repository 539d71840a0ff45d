//! Seed splitting.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! the run seed, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: u64 = 1 << 32;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_DROPOUT: u64 = 3;
pub const STREAM_SPLIT: u64 = 4;
pub const STREAM_FOLDS: u64 = 5;
pub const STREAM_SYNTH: u64 = 6 << 32;
pub const STREAM_SYNTH_LAYOUT: u64 = 7;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
