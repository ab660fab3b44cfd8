//! Counter-based random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the run
//! seed plus a small tuple of counters, so results never depend on the order
//! in which workers draw numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Distinct tags keep otherwise equal counters apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    PlanNoise = 1,
    Termination = 2,
    Init = 3,
    Training = 4,
    Schedule = 5,
    Probe = 6,
}

/// Stream keyed by `(seed, purpose, a, b)`.
pub fn stream_rng(seed: u64, purpose: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Pack two 32-bit counters into one stream word.
pub fn pack(hi: u64, lo: u64) -> u64 {
    (hi << 32) ^ (lo & 0xffff_ffff)
}
