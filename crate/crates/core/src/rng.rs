//! Seed-derived random streams. Every consumer of randomness gets its own
//! stream keyed by purpose and step, so adding draws in one place never
//! shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Batch = 2,
    Prompt = 3,
    Mix = 4,
    Latent = 5,
    Synthesis = 6,
    Pairs = 7,
    Corpus = 8,
    Embedder = 9,
    Eval = 10,
}

pub fn stream(seed: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}
