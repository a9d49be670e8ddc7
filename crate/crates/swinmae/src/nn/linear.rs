//! Fully-connected layer over rows of tokens.

use crate::store::{GradStore, Init, ParamStore, TensorSpec};
use crate::tensor::{matmul, matmul_nt, matmul_tn_acc, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(prefix: &str, din: usize, dout: usize) -> Self {
        Linear {
            weight: format!("{prefix}.weight"),
            bias: Some(format!("{prefix}.bias")),
            din,
            dout,
        }
    }

    pub fn without_bias(prefix: &str, din: usize, dout: usize) -> Self {
        Linear {
            weight: format!("{prefix}.weight"),
            bias: None,
            din,
            dout,
        }
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        let mut v = vec![TensorSpec::new(
            &self.weight,
            &[self.din, self.dout],
            Init::TruncNormal,
        )];
        if let Some(b) = &self.bias {
            v.push(TensorSpec::new(b, &[self.dout], Init::Zeros));
        }
        v
    }

    /// y(rows x dout) = x(rows x din) W + b
    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), rows * self.din);
        let w = params.get(&self.weight).data();
        let mut y = matmul(rows, self.din, self.dout, x, w);
        if let Some(bn) = &self.bias {
            let b = params.get(bn).data();
            for row in y.chunks_mut(self.dout) {
                for (v, bv) in row.iter_mut().zip(b) {
                    *v = *v + *bv;
                }
            }
        }
        y
    }

    /// Accumulates dW (and db) into `grads`, returns dx.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        grads: &mut GradStore<T>,
        x: &[T],
        dy: &[T],
        rows: usize,
    ) -> Vec<T> {
        debug_assert_eq!(dy.len(), rows * self.dout);
        let mut dw = Tensor::<T>::zeros(&[self.din, self.dout]);
        matmul_tn_acc(self.din, rows, self.dout, x, dy, dw.data_mut());
        grads.accum(&self.weight, dw);
        if let Some(bn) = &self.bias {
            let mut db = Tensor::<T>::zeros(&[self.dout]);
            for row in dy.chunks(self.dout) {
                for (g, v) in db.data_mut().iter_mut().zip(row) {
                    *g = *g + *v;
                }
            }
            grads.accum(bn, db);
        }
        let w = params.get(&self.weight).data();
        matmul_nt(rows, self.dout, self.din, dy, w)
    }
}
