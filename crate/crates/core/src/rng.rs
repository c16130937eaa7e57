//! Deterministic, order-independent RNG streams.
//!
//! Every random decision in a run is drawn from a stream keyed by a base
//! seed plus a role tag and position (step, worker, ...). Streams are
//! derived statelessly, so concurrent consumers never perturb each other
//! — the foundation of the overlap-mode bitwise reproducibility contract.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates sequential tag values.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Collapse `(seed, tags...)` into a single derived seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mut state = mix(seed ^ 0x5851f42d4c957f2d);
    for &t in tags {
        state = mix(state ^ t.wrapping_mul(0xd1342543de82ef95));
    }
    state
}

/// A ChaCha8 stream for `(seed, tags...)`. Identical inputs give identical
/// streams on every platform.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

/// Role tags, kept in one place so call sites cannot collide.
pub mod role {
    pub const INIT: u64 = 1;
    pub const SHARD: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const ATTACK: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const DATA_GEN: u64 = 6;
    pub const PROBE: u64 = 7;
}
