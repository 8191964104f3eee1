//! Seed derivation for reproducible, order-independent random streams.
//!
//! Every random decision in a simulation draws from a stream keyed by
//! `(master seed, role, participant, round)`. Streams never depend on the
//! order in which work is scheduled, so serial and parallel execution agree.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The random stream type used throughout the crate.
pub type Stream = ChaCha8Rng;

/// What a derived stream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Role {
    Dataset = 1,
    Holdout = 2,
    Warmup = 3,
    Partition = 4,
    Corruption = 5,
    Contributor = 6,
    Tester = 7,
    Center = 8,
    Oracle = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a sequence of keys into a new 64-bit seed.
pub fn derive_seed(master: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(master), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// A fresh stream from a plain seed.
pub fn stream(seed: u64) -> Stream {
    Stream::seed_from_u64(seed)
}

/// The stream for `(master, role, participant, round)`.
pub fn substream(master: u64, role: Role, participant: u64, round: u64) -> Stream {
    stream(derive_seed(master, &[role as u64, participant, round]))
}
