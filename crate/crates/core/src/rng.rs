//! Deterministic random-stream derivation.
//!
//! Every stochastic component (scene synthesis, sampling, weight init,
//! dropout, shuffling) draws from its own ChaCha8 stream derived from the
//! user seed plus a purpose tag and optional indices. Streams are therefore
//! independent of each other and of call order, which is what makes whole
//! pipeline runs reproducible bit-for-bit.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// SplitMix64 finalizer; good avalanche behaviour for seed mixing.
#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit tag for a purpose label (FNV-1a over the bytes).
pub fn tag(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive an independent ChaCha8 stream from a base seed and a tag chain.
///
/// The 256-bit ChaCha key is filled by iterating SplitMix64 over the mixed
/// (seed, tags) state, so distinct tag chains give unrelated streams.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ 0x5851_f42d_4c95_7f2d);
    for &t in tags {
        state = splitmix64(state ^ t);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_inputs_same_stream() {
        let mut a = stream(7, &[tag("sample"), 3]);
        let mut b = stream(7, &[tag("sample"), 3]);
        for _ in 0..16 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn different_tags_decorrelate() {
        let mut a = stream(7, &[tag("sample"), 3]);
        let mut b = stream(7, &[tag("sample"), 4]);
        let mut c = stream(7, &[tag("jitter"), 3]);
        let (x, y, z) = (a.random::<u64>(), b.random::<u64>(), c.random::<u64>());
        assert_ne!(x, y);
        assert_ne!(x, z);
        assert_ne!(y, z);
    }

    #[test]
    fn tag_is_stable_across_runs() {
        // FNV-1a of "sample"; frozen so stream derivations never drift.
        assert_eq!(tag("sample"), 0xf3d8_02fe_7a8b_a4c7);
    }
}
