//! Seeded random streams.
//!
//! Every run component (trainer, sampler, evaluation) and every particle in a
//! population draws from its own ChaCha stream derived from one master seed,
//! so changing how one component consumes randomness does not perturb others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers for the run components.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Trainer = 2,
    Sampler = 3,
    Eval = 4,
    Data = 5,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    substream(seed, which as u64)
}

/// Independent stream `index` under `seed`.
pub fn substream(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `n` per-particle streams derived from one parent draw.
pub fn particle_streams(parent: &mut Rng, n: usize) -> Vec<Rng> {
    use rand::Rng as _;
    let base: u64 = parent.random();
    (0..n).map(|i| substream(base, i as u64 + 1)).collect()
}
