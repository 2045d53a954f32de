//! Seed derivation for reproducible, independent random streams.
//!
//! Every stream is a ChaCha generator keyed by a 64-bit seed and a 64-bit
//! stream id; both are derived by mixing an experiment seed with a path of
//! labels, so a trial's data never depends on which other jobs ran.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Rng = ChaCha12Rng;

/// Named purposes, so that e.g. the pre-training data of a trial is the same
/// regardless of the regularization strength being swept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Truth = 1,
    PretrainCovariates = 2,
    PretrainLabels = 3,
    DownstreamCovariates = 4,
    DownstreamLabels = 5,
    Init = 6,
    Evaluation = 7,
    Complexity = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of integer labels.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Generator for `(seed, path)` on the stream of `purpose`.
pub fn stream(seed: u64, path: &[u64], purpose: Purpose) -> Rng {
    let mut rng = Rng::seed_from_u64(derive_seed(seed, path));
    rng.set_stream(purpose as u64);
    rng
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
