//! Counter-based random streams.
//!
//! Every random quantity is drawn from a ChaCha8 stream keyed by a 64-bit
//! seed and addressed by `(index, purpose)`, so work items can run in any
//! order and on any thread and still see the same numbers.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a stream is used for; keeps streams of the same index disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Tree = 1,
    Bag = 2,
    Mcmc = 3,
    StudyEffects = 4,
    Covariates = 5,
    Outcomes = 6,
    TargetProfiles = 7,
    TargetEffects = 8,
    Learner = 9,
    Calibration = 10,
}

/// Independent stream `(index, purpose)` under `seed`.
pub fn stream(seed: u64, index: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((index << 8) | purpose as u64);
    rng
}

/// A child seed, for handing to a component that derives its own streams.
pub fn derive_seed(seed: u64, index: u64, purpose: Purpose) -> u64 {
    stream(seed, index, purpose).next_u64()
}
