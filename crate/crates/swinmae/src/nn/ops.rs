//! Pointwise activations and row softmax with their derivatives.

use crate::tensor::Scalar;

/// tanh-form GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    T::from_f64(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

/// In-place softmax over each row of an n x d buffer. Entries of -inf are
/// legal and map to exactly zero.
pub fn softmax_rows<T: Scalar>(buf: &mut [T], d: usize) {
    for row in buf.chunks_mut(d) {
        let mut m = T::neg_infinity();
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// Backward of row softmax: ds = p * (dp - sum(dp * p)), written over `dp`.
pub fn softmax_rows_backward<T: Scalar>(probs: &[T], dp: &mut [T], d: usize) {
    for (p_row, d_row) in probs.chunks(d).zip(dp.chunks_mut(d)) {
        let mut dot = T::zero();
        for (p, g) in p_row.iter().zip(d_row.iter()) {
            dot = dot + *p * *g;
        }
        for (p, g) in p_row.iter().zip(d_row.iter_mut()) {
            *g = *p * (*g - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_fixed_points_and_monotonicity() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(3.0f64) - 3.0).abs() < 0.01);
        assert!(gelu(-3.0f64).abs() < 0.01);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-2.0f64, -0.5, 0.0, 0.3, 1.7] {
            let eps = 1e-6;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_rows_normalize_and_handle_neg_inf() {
        let mut buf = vec![1.0f64, 2.0, 3.0, f64::NEG_INFINITY, 0.0, 0.0];
        softmax_rows(&mut buf, 3);
        let s0: f64 = buf[..3].iter().sum();
        let s1: f64 = buf[3..].iter().sum();
        assert!((s0 - 1.0).abs() < 1e-12);
        assert!((s1 - 1.0).abs() < 1e-12);
        assert_eq!(buf[3], 0.0);
        assert!(buf.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn softmax_backward_matches_finite_difference() {
        let logits = vec![0.3f64, -1.0, 0.7, 0.1];
        let upstream = vec![0.9f64, -0.2, 0.4, 0.05];
        let mut probs = logits.clone();
        softmax_rows(&mut probs, 4);
        let mut ds = upstream.clone();
        softmax_rows_backward(&probs, &mut ds, 4);
        for i in 0..4 {
            let eps = 1e-6;
            let mut lp = logits.clone();
            lp[i] += eps;
            softmax_rows(&mut lp, 4);
            let mut lm = logits.clone();
            lm[i] -= eps;
            softmax_rows(&mut lm, 4);
            let fd: f64 = lp
                .iter()
                .zip(lm.iter())
                .zip(upstream.iter())
                .map(|((a, b), u)| u * (a - b) / (2.0 * eps))
                .sum();
            assert!((ds[i] - fd).abs() < 1e-8);
        }
    }
}
