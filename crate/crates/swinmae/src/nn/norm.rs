//! Layer normalization over the channel dimension of each token.

use crate::store::{GradStore, Init, ParamStore, TensorSpec};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct LnCache<T> {
    /// Normalized activations, rows x dim.
    pub xhat: Vec<T>,
    /// Reciprocal standard deviation per row.
    pub rstd: Vec<T>,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            dim,
        }
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        vec![
            TensorSpec::new(&self.gamma, &[self.dim], Init::Ones),
            TensorSpec::new(&self.beta, &[self.dim], Init::Zeros),
        ]
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &[T],
        rows: usize,
    ) -> (Vec<T>, LnCache<T>) {
        let d = self.dim;
        debug_assert_eq!(x.len(), rows * d);
        let gamma = params.get(&self.gamma).data();
        let beta = params.get(&self.beta).data();
        let inv_d = T::one() / T::from_f64(d as f64);
        let eps = T::from_f64(LN_EPS);

        let mut y = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = T::zero();
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let xh = (row[i] - mean) * rs;
                xhat[r * d + i] = xh;
                y[r * d + i] = xh * gamma[i] + beta[i];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        grads: &mut GradStore<T>,
        cache: &LnCache<T>,
        dy: &[T],
        rows: usize,
    ) -> Vec<T> {
        let d = self.dim;
        let gamma = params.get(&self.gamma).data();
        let inv_d = T::one() / T::from_f64(d as f64);

        let mut dgamma = Tensor::<T>::zeros(&[d]);
        let mut dbeta = Tensor::<T>::zeros(&[d]);
        let mut dx = vec![T::zero(); rows * d];
        for r in 0..rows {
            let dy_row = &dy[r * d..(r + 1) * d];
            let xh_row = &cache.xhat[r * d..(r + 1) * d];
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for i in 0..d {
                let g = dy_row[i] * gamma[i];
                mean_g = mean_g + g;
                mean_gx = mean_gx + g * xh_row[i];
                dgamma.data_mut()[i] = dgamma.data_mut()[i] + dy_row[i] * xh_row[i];
                dbeta.data_mut()[i] = dbeta.data_mut()[i] + dy_row[i];
            }
            mean_g = mean_g * inv_d;
            mean_gx = mean_gx * inv_d;
            let rs = cache.rstd[r];
            for i in 0..d {
                let g = dy_row[i] * gamma[i];
                dx[r * d + i] = rs * (g - mean_g - xh_row[i] * mean_gx);
            }
        }
        grads.accum(&self.gamma, dgamma);
        grads.accum(&self.beta, dbeta);
        dx
    }
}
