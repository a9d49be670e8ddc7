//! Grid resampling: 2x2 patch merging (downsample, channels double), its
//! pixel-shuffle counterpart (upsample, channels halve), and the final
//! patch-size expansion used by the segmentation head.

use crate::error::{Error, Result};
use crate::store::{GradStore, ParamStore, TensorSpec};
use crate::tensor::Scalar;

use super::norm::{LayerNorm, LnCache};
use super::Linear;

/// Concatenate each 2x2 neighborhood (4C), LayerNorm, project to 2C.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduce: Linear,
    pub grid: (usize, usize),
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct MergeCache<T> {
    pub concat: Vec<T>,
    pub ln: LnCache<T>,
}

impl PatchMerge {
    pub fn new(prefix: &str, grid: (usize, usize), dim: usize) -> Result<Self> {
        if grid.0 % 2 != 0 || grid.1 % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot merge odd grid {grid:?}"
            )));
        }
        Ok(PatchMerge {
            norm: LayerNorm::new(&format!("{prefix}.norm"), 4 * dim),
            reduce: Linear::without_bias(&format!("{prefix}.reduce"), 4 * dim, 2 * dim),
            grid,
            dim,
        })
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        let mut v = self.norm.specs();
        v.extend(self.reduce.specs());
        v
    }

    pub fn out_grid(&self) -> (usize, usize) {
        (self.grid.0 / 2, self.grid.1 / 2)
    }

    /// Neighborhood gather: output row t holds the (0,0),(0,1),(1,0),(1,1)
    /// input tokens back to back.
    fn concat<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let nw = self.grid.1;
        let c = self.dim;
        let (oh, ow) = self.out_grid();
        let mut out = vec![T::zero(); oh * ow * 4 * c];
        for i in 0..oh {
            for j in 0..ow {
                let dst = (i * ow + j) * 4 * c;
                for (q, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let src = ((2 * i + dy) * nw + (2 * j + dx)) * c;
                    out[dst + q * c..dst + (q + 1) * c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
        out
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &[T]) -> (Vec<T>, MergeCache<T>) {
        let (oh, ow) = self.out_grid();
        let rows = oh * ow;
        let concat = self.concat(x);
        let (normed, ln) = self.norm.forward(params, &concat, rows);
        let y = self.reduce.forward(params, &normed, rows);
        (y, MergeCache { concat, ln })
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        grads: &mut GradStore<T>,
        cache: &MergeCache<T>,
        dy: &[T],
    ) -> Vec<T> {
        let (oh, ow) = self.out_grid();
        let rows = oh * ow;
        let c = self.dim;
        let gamma = params.get(&self.norm.gamma).data();
        let beta = params.get(&self.norm.beta).data();
        let d4 = 4 * c;
        let normed: Vec<T> = cache
            .ln
            .xhat
            .iter()
            .enumerate()
            .map(|(i, &xh)| xh * gamma[i % d4] + beta[i % d4])
            .collect();
        let d_norm = self.reduce.backward(params, grads, &normed, dy, rows);
        let d_concat = self.norm.backward(params, grads, &cache.ln, &d_norm, rows);

        let (nh, nw) = self.grid;
        let mut dx = vec![T::zero(); nh * nw * c];
        for i in 0..oh {
            for j in 0..ow {
                let src = (i * ow + j) * 4 * c;
                for (q, (dy_, dx_)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let dst = ((2 * i + dy_) * nw + (2 * j + dx_)) * c;
                    dx[dst..dst + c].copy_from_slice(&d_concat[src + q * c..src + (q + 1) * c]);
                }
            }
        }
        dx
    }
}

/// Linear C -> 2C, then pixel-shuffle the channel blocks into a 2x2 spatial
/// block of C/2 channels.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub proj: Linear,
    pub grid: (usize, usize),
    pub dim: usize,
}

impl PatchExpand {
    pub fn new(prefix: &str, grid: (usize, usize), dim: usize) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot expand odd channel width {dim}"
            )));
        }
        Ok(PatchExpand {
            proj: Linear::without_bias(&format!("{prefix}.proj"), dim, 2 * dim),
            grid,
            dim,
        })
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        self.proj.specs()
    }

    pub fn out_grid(&self) -> (usize, usize) {
        (self.grid.0 * 2, self.grid.1 * 2)
    }

    pub fn out_dim(&self) -> usize {
        self.dim / 2
    }

    fn shuffle<T: Scalar>(&self, t: &[T]) -> Vec<T> {
        let (nh, nw) = self.grid;
        let co = self.out_dim();
        let ow = nw * 2;
        let mut out = vec![T::zero(); nh * nw * 4 * co];
        for i in 0..nh {
            for j in 0..nw {
                let src = (i * nw + j) * 4 * co;
                for (q, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let dst = ((2 * i + dy) * ow + (2 * j + dx)) * co;
                    out[dst..dst + co].copy_from_slice(&t[src + q * co..src + (q + 1) * co]);
                }
            }
        }
        out
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &[T]) -> (Vec<T>, Vec<T>) {
        let rows = self.grid.0 * self.grid.1;
        let t = self.proj.forward(params, x, rows);
        let y = self.shuffle(&t);
        // Cache is the projection input.
        (y, x.to_vec())
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        grads: &mut GradStore<T>,
        cache_x: &[T],
        dy: &[T],
    ) -> Vec<T> {
        let (nh, nw) = self.grid;
        let co = self.out_dim();
        let ow = nw * 2;
        let rows = nh * nw;
        let mut dt = vec![T::zero(); rows * 4 * co];
        for i in 0..nh {
            for j in 0..nw {
                let dst = (i * nw + j) * 4 * co;
                for (q, (dy_, dx_)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let src = ((2 * i + dy_) * ow + (2 * j + dx_)) * co;
                    dt[dst + q * co..dst + (q + 1) * co].copy_from_slice(&dy[src..src + co]);
                }
            }
        }
        self.proj.backward(params, grads, cache_x, &dt, rows)
    }
}

/// Linear C -> p^2 C, then pixel-shuffle into a p x p spatial block keeping C
/// channels; restores full image resolution ahead of the per-pixel head.
#[derive(Clone, Debug)]
pub struct FinalExpand {
    pub proj: Linear,
    pub grid: (usize, usize),
    pub dim: usize,
    pub factor: usize,
}

impl FinalExpand {
    pub fn new(prefix: &str, grid: (usize, usize), dim: usize, factor: usize) -> Self {
        FinalExpand {
            proj: Linear::without_bias(&format!("{prefix}.proj"), dim, factor * factor * dim),
            grid,
            dim,
            factor,
        }
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        self.proj.specs()
    }

    pub fn out_grid(&self) -> (usize, usize) {
        (self.grid.0 * self.factor, self.grid.1 * self.factor)
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &[T]) -> (Vec<T>, Vec<T>) {
        let (nh, nw) = self.grid;
        let p = self.factor;
        let c = self.dim;
        let rows = nh * nw;
        let t = self.proj.forward(params, x, rows);
        let ow = nw * p;
        let mut out = vec![T::zero(); rows * p * p * c];
        for i in 0..nh {
            for j in 0..nw {
                let src = (i * nw + j) * p * p * c;
                for dy in 0..p {
                    for dx in 0..p {
                        let dst = ((i * p + dy) * ow + (j * p + dx)) * c;
                        let blk = src + (dy * p + dx) * c;
                        out[dst..dst + c].copy_from_slice(&t[blk..blk + c]);
                    }
                }
            }
        }
        (out, x.to_vec())
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        grads: &mut GradStore<T>,
        cache_x: &[T],
        dy: &[T],
    ) -> Vec<T> {
        let (nh, nw) = self.grid;
        let p = self.factor;
        let c = self.dim;
        let rows = nh * nw;
        let ow = nw * p;
        let mut dt = vec![T::zero(); rows * p * p * c];
        for i in 0..nh {
            for j in 0..nw {
                let dst = (i * nw + j) * p * p * c;
                for dy_ in 0..p {
                    for dx_ in 0..p {
                        let src = ((i * p + dy_) * ow + (j * p + dx_)) * c;
                        let blk = dst + (dy_ * p + dx_) * c;
                        dt[blk..blk + c].copy_from_slice(&dy[src..src + c]);
                    }
                }
            }
        }
        self.proj.backward(params, grads, cache_x, &dt, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::ParamStore;
    use crate::tensor::Tensor;
    use rand::Rng;

    #[test]
    fn merge_shapes() {
        let m = PatchMerge::new("m", (4, 4), 8).unwrap();
        let params = ParamStore::<f32>::init(&m.specs(), 1).unwrap();
        let x = vec![0.5f32; 16 * 8];
        let (y, _) = m.forward(&params, &x);
        assert_eq!(m.out_grid(), (2, 2));
        assert_eq!(y.len(), 4 * 16);
        assert!(PatchMerge::new("m", (3, 4), 8).is_err());
    }

    #[test]
    fn expand_shapes() {
        let e = PatchExpand::new("e", (2, 2), 16).unwrap();
        let params = ParamStore::<f32>::init(&e.specs(), 1).unwrap();
        let x = vec![0.5f32; 4 * 16];
        let (y, _) = e.forward(&params, &x);
        assert_eq!(e.out_grid(), (4, 4));
        assert_eq!(e.out_dim(), 8);
        assert_eq!(y.len(), 16 * 8);
        assert!(PatchExpand::new("e", (2, 2), 7).is_err());
    }

    #[test]
    fn constant_input_with_mean_weights_stays_constant() {
        // Averaging projection: each output channel is the mean of the four
        // spatial copies of that channel, so a constant field stays constant.
        let c = 4;
        let m = PatchMerge::new("m", (4, 4), c).unwrap();
        let mut params = ParamStore::<f64>::init(&m.specs(), 0).unwrap();
        let mut w = vec![0.0f64; 4 * c * 2 * c];
        for out_ch in 0..2 * c {
            for q in 0..4 {
                let in_ch = q * c + (out_ch % c);
                w[in_ch * 2 * c + out_ch] = 0.25;
            }
        }
        params.insert(
            "m.reduce.weight",
            Tensor::from_vec(&[4 * c, 2 * c], w).unwrap(),
        );
        let x: Vec<f64> = (0..16 * c).map(|i| (i % c) as f64 + 1.0).collect();
        let (y, _) = m.forward(&params, &x);
        // Per-token LN of the tiled 4C vector is identical for every token,
        // so the projected output is constant across tokens.
        for token in y.chunks(2 * c).skip(1) {
            assert_eq!(token, &y[..2 * c]);
        }
    }

    #[test]
    fn expand_then_merge_with_inverse_weights_is_identity() {
        // Expand with [I; -I]-style weights produces per-token vectors with
        // zero mean; normalizing the input rows makes the merge LayerNorm a
        // pure rescale that the reduction projection undoes.
        let c = 6;
        let grid = (2, 2);
        let e = PatchExpand::new("e", grid, c).unwrap();
        let m = PatchMerge::new("m", (4, 4), c / 2).unwrap();
        let mut params = ParamStore::<f64>::init(&e.specs(), 0).unwrap();
        for spec in m.specs() {
            params.insert(
                spec.name.clone(),
                crate::nn::init::init_tensor::<f64>(&spec, 0),
            );
        }
        // Expand projection: channel block layout [x, -x].
        let mut we = vec![0.0f64; c * 2 * c];
        for i in 0..c {
            we[i * 2 * c + i] = 1.0;
            we[i * 2 * c + c + i] = -1.0;
        }
        params.insert("e.proj.weight", Tensor::from_vec(&[c, 2 * c], we).unwrap());
        // Merge reduction: pick the first c channels back out, undoing the
        // 1/sqrt(var + eps) factor of the norm (var = 1 on normalized rows).
        let scale = (1.0 + crate::nn::norm::LN_EPS).sqrt();
        let mut wm = vec![0.0f64; 2 * c * c];
        for i in 0..c {
            wm[i * c + i] = scale;
        }
        params.insert(
            "m.reduce.weight",
            Tensor::from_vec(&[2 * c, c], wm).unwrap(),
        );

        // Rows normalized to squared norm c, so the expanded 2c vector has
        // mean 0 and variance exactly 1.
        let mut rng = crate::rng::rng_from(8, "x", &[]);
        let mut x: Vec<f64> = (0..4 * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for row in x.chunks_mut(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v *= (c as f64).sqrt() / norm;
            }
        }
        let (expanded, _) = e.forward(&params, &x);
        let (back, _) = m.forward(&params, &expanded);
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn final_expand_shapes() {
        let f = FinalExpand::new("f", (4, 4), 8, 4);
        let params = ParamStore::<f32>::init(&f.specs(), 2).unwrap();
        let x = vec![0.1f32; 16 * 8];
        let (y, _) = f.forward(&params, &x);
        assert_eq!(f.out_grid(), (16, 16));
        assert_eq!(y.len(), 256 * 8);
    }
}
