//! Seed derivation.
//!
//! Every random stream in a run is a ChaCha8 stream keyed by the run seed and
//! a path of integers (pass, site, batch, chunk, ...). Streams are therefore
//! independent of scheduling and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the generator for `path` under `seed`.
pub fn stream(seed: u64, path: &[u64]) -> SimRng {
    let mut state = seed;
    let mut h = splitmix64(&mut state);
    for &p in path {
        state ^= p.wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ h;
        h = splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for word in key.chunks_exact_mut(8) {
        word.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Derive a child seed, for handing a sub-computation its own seed space.
pub fn child_seed(seed: u64, path: &[u64]) -> u64 {
    use rand::RngCore;
    stream(seed, path).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn same_path_same_stream() {
        let a = stream(7, &[1, 2, 3]).next_u64();
        let b = stream(7, &[1, 2, 3]).next_u64();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_paths_differ() {
        let a = stream(7, &[1, 2]).next_u64();
        let b = stream(7, &[2, 1]).next_u64();
        let c = stream(8, &[1, 2]).next_u64();
        let d = stream(7, &[1, 2, 0]).next_u64();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
