//! Seeded random streams.
//!
//! All randomness in a run flows from one master seed. Each stage draws from
//! its own ChaCha stream so that, for example, changing the masking ratio does
//! not perturb parameter initialization or batch order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Masking,
    Shuffling,
    Sparsify,
    Synthetic,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Masking => 2,
            Stream::Shuffling => 3,
            Stream::Sparsify => 4,
            Stream::Synthetic => 5,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
