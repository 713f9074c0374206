//! Deterministic random streams.
//!
//! Every randomized stage owns a ChaCha stream keyed by the run seed plus a
//! tag path (purpose, epoch, scene id, ...). Streams are independent of
//! execution order, which keeps parallel scene processing bit-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Values are part of the reproducibility contract: changing
/// them changes every derived stream.
pub mod tag {
    pub const BANK: u64 = 0x01;
    pub const SCENE: u64 = 0x02;
    pub const MIX: u64 = 0x03;
    pub const LOCAL_AUG: u64 = 0x04;
    pub const SCAN: u64 = 0x05;
    pub const INIT: u64 = 0x06;
    pub const DROPOUT: u64 = 0x07;
    pub const PERTURB: u64 = 0x08;
    pub const SHUFFLE: u64 = 0x09;
    pub const GRAD_CHECK: u64 = 0x0a;
    pub const STEP: u64 = 0x0b;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a stream key from a seed and a tag path.
pub fn stream_key(seed: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix(seed);
    for &t in tags {
        state = splitmix(state ^ t);
    }
    state
}

/// A ChaCha8 generator keyed by `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, tags))
}
