//! Deterministic random stream derivation.
//!
//! Every stochastic step in the pipeline draws from its own named stream so
//! that results are a pure function of the master seed. Resuming a run
//! re-derives the exact same streams from (seed, tag, salt) without having
//! to persist generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over a byte string; also used for config digests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mixes a master seed with a stream tag and a numeric salt into a 64-bit
/// stream seed. FNV-1a over the tag bytes, then splitmix64 finalization.
pub fn stream_seed(master: u64, tag: &str, salt: u64) -> u64 {
    let mut z = master ^ fnv1a64(tag.as_bytes()) ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A generator for the named stream.
pub fn stream_rng(master: u64, tag: &str, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, tag, salt))
}
