//! Named, seedable random streams.
//!
//! Every stochastic consumer derives its own ChaCha stream from
//! `(global seed, purpose tag, indices)`, so results do not depend on
//! which thread draws first or on how work is partitioned.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent stream for `tag` at position `indices`.
pub fn stream(seed: u64, tag: &str, indices: &[u64]) -> StreamRng {
    let mut state = seed ^ fnv1a(tag.as_bytes()).rotate_left(17);
    splitmix(&mut state);
    for &i in indices {
        state ^= i.wrapping_mul(0xd6e8_feb8_6659_fd93);
        splitmix(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix(&mut state).to_le_bytes());
    }
    StreamRng::from_seed(key)
}
