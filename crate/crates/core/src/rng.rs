//! Named, independent RNG streams derived from a single run seed.
//!
//! Every consumer of randomness (data sampling, dropout, weight init, eval
//! episodes, ...) draws from its own stream, so toggling one consumer on or
//! off never shifts the random sequence seen by another. Stream derivation
//! uses FNV-1a + splitmix64, both fixed algorithms, so traces are stable
//! across platforms and releases.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Build the RNG for `(seed, stream)`. Distinct stream names give
/// statistically independent sequences; equal pairs give identical ones.
pub fn stream_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a(stream.as_bytes());
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
