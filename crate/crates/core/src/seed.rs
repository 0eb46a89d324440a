//! Seed derivation for independent RNG streams.
//!
//! Every stream (pool generation, partitioning, concept shift, each client's
//! shuffling in each round) is seeded from the run seed plus a tag, so the
//! order in which clients run cannot change what they draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_POOL: u64 = 0x706f_6f6c;
pub const STREAM_PARTITION: u64 = 0x7061_7274;
pub const STREAM_SHIFT: u64 = 0x7368_6966;
pub const STREAM_MODEL: u64 = 0x6d6f_6465;
pub const STREAM_CLIENT: u64 = 0x636c_6e74;
pub const STREAM_HYPERNET: u64 = 0x6879_7065;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}
