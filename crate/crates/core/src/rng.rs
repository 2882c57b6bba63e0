//! Seed fan-out.
//!
//! Every command takes a single `u64` seed. Each consumer of randomness draws
//! from its own ChaCha8 stream: the generator is seeded with that `u64` and then
//! switched to the stream number listed on [`SeedStream`]. Streams never overlap,
//! so adding a new consumer does not perturb the existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum SeedStream {
    /// Validation images drawn from the official test partition.
    ValidationSplit = 1,
    /// Spatial locations sampled for projection fitting.
    LocationSampling = 2,
    /// Initial unmixing matrix of FastICA.
    IcaInit = 3,
    /// Xavier initialization of the classifier.
    ParamInit = 4,
    /// Per-epoch shuffling of the training set.
    Shuffle = 5,
    /// Synthetic data generators used by tests and benches.
    Synthetic = 6,
}

pub fn stream_rng(seed: u64, stream: SeedStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
