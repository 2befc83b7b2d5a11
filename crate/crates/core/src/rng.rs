//! Counter-based random streams derived from a single root seed.
//!
//! Each consumer asks for a `(seed, stream)` pair; ChaCha's 64-bit stream id
//! keeps the sequences independent without any shared state, so the same seed
//! list reproduces the same numbers regardless of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Named purposes for random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Instance,
    Episodes,
    Dataset,
    Gradient,
    Evaluation,
    Custom(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Instance => 1,
            Stream::Episodes => 2,
            Stream::Dataset => 3,
            Stream::Gradient => 4,
            Stream::Evaluation => 5,
            Stream::Custom(n) => 1 << 32 | n,
        }
    }
}

pub fn stream_rng(seed: u64, stream: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Stream for the `index`-th sub-task (trial, worker, ...) under a purpose.
pub fn indexed_rng(seed: u64, stream: Stream, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream.id());
    rng
}
