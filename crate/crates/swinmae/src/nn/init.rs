//! Weight initialization.

use rand::Rng;

use crate::rng::rng_from;
use crate::store::{Init, TensorSpec};
use crate::tensor::{Scalar, Tensor};

pub const TRUNC_NORMAL_SIGMA: f64 = 0.02;

/// Standard normal via Box-Muller. Two uniform draws per sample keeps the
/// stream layout independent of acceptance behaviour downstream.
fn standard_normal(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Truncated normal: resample until within +/- 2 sigma.
fn trunc_normal(rng: &mut rand_chacha::ChaCha8Rng, sigma: f64) -> f64 {
    loop {
        let z = standard_normal(rng);
        if z.abs() <= 2.0 {
            return z * sigma;
        }
    }
}

/// Materialize one tensor from its spec. Random draws always happen at f64
/// and are cast down, so f32 and f64 stores agree to rounding.
pub fn init_tensor<T: Scalar>(spec: &TensorSpec, seed: u64) -> Tensor<T> {
    let n: usize = spec.shape.iter().product();
    let data: Vec<T> = match spec.init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::TruncNormal => {
            let mut rng = rng_from(seed, "init", &[fnv1a(&spec.name)]);
            (0..n)
                .map(|_| T::from_f64(trunc_normal(&mut rng, TRUNC_NORMAL_SIGMA)))
                .collect()
        }
    };
    Tensor::from_vec(&spec.shape, data).expect("spec shape consistent")
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in s.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{Init, TensorSpec};

    #[test]
    fn trunc_normal_respects_bounds_and_spread() {
        let spec = TensorSpec::new("w", &[10_000], Init::TruncNormal);
        let t = init_tensor::<f64>(&spec, 3);
        let max_abs = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_abs <= 2.0 * TRUNC_NORMAL_SIGMA + 1e-12);
        let var: f64 = t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        // truncation at 2 sigma shrinks variance to ~0.774 sigma^2
        let expected = 0.7737 * TRUNC_NORMAL_SIGMA * TRUNC_NORMAL_SIGMA;
        assert!((var - expected).abs() < 0.1 * expected, "var {var}");
    }

    #[test]
    fn f32_init_matches_f64_downcast() {
        let spec = TensorSpec::new("q", &[32], Init::TruncNormal);
        let a = init_tensor::<f32>(&spec, 11);
        let b = init_tensor::<f64>(&spec, 11);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
