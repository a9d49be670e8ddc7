//! Seed derivation and deterministic RNG construction.
//!
//! Every random draw in the crate flows through a ChaCha8 stream seeded by
//! hashing a root seed with a domain tag and optional indices. Derived seeds
//! are order-insensitive: workers can consume them in any schedule and still
//! produce identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; mixes a single word.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed, a domain tag, and indices.
pub fn derive_seed(root: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = mix(root);
    for &b in tag.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    for &ix in indices {
        h = mix(h ^ ix);
    }
    h
}

pub fn rng_from(root: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag, indices))
}

/// Fisher-Yates permutation of 0..n.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::Rng;
    let mut out: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        out.swap(i, j);
    }
    out
}
