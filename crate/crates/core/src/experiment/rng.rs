//! Seed derivation for independent random streams.
//!
//! Every stream is a ChaCha8 generator seeded with
//! `splitmix64(splitmix64(splitmix64(master) ^ trial) ^ purpose)`, where
//! `splitmix64` is the finalizer of the SplitMix64 generator. ChaCha8 output
//! is platform-independent, and a trial's streams depend only on the master
//! seed, the trial index and the purpose, never on how many trials run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    Mcmc = 2,
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_seed(master: u64, trial: u64, purpose: Purpose) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ trial) ^ purpose as u64)
}

pub fn stream(master: u64, trial: u64, purpose: Purpose) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, trial, purpose))
}
