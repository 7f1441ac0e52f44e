//! Deterministic seed derivation.
//!
//! Every random decision in a run flows from one master seed through named
//! substreams, so runs are reproducible regardless of thread scheduling.
//! Work items executed in parallel never share a stream; each derives its
//! own seed from content (labels, indices, identifiers).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby inputs.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a hash of a label.
pub fn hash_label(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Combine seed material into one derived seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x51_7c_c1_b7_27_22_0a_95u64;
    for p in parts {
        acc = splitmix(acc ^ splitmix(*p));
    }
    acc
}

/// Seed for the `idx`-th element of the named substream of `master`.
pub fn stream(master: u64, label: &str, idx: u64) -> u64 {
    mix(&[master, hash_label(label), idx])
}

/// Deterministic RNG from a derived seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
