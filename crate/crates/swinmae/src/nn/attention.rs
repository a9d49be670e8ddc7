//! Window multi-head self-attention with relative position bias and the
//! cyclic-shift masking used by alternating blocks.

use crate::error::{Error, Result};
use crate::store::{GradStore, Init, ParamStore, TensorSpec};
use crate::tensor::{Scalar, Tensor};

use super::ops::{softmax_rows, softmax_rows_backward};

/// Tiling of a token grid into M x M windows under an optional cyclic shift,
/// with everything attention needs precomputed: token index lists, the shift
/// permutation and its inverse, per-window reachability masks, and the
/// relative-position index table.
#[derive(Clone, Debug)]
pub struct WindowGeometry {
    pub grid: (usize, usize),
    pub window: usize,
    pub shift: usize,
    /// Token indices (into the current layout) per window, row-major.
    pub windows: Vec<Vec<usize>>,
    /// shifted[i] = original[shift_map[i]]; identity when shift == 0.
    pub shift_map: Vec<usize>,
    pub inv_shift_map: Vec<usize>,
    /// Per window: None when every pair may attend, else an M^2 x M^2
    /// allowed-pair matrix.
    pub masks: Vec<Option<Vec<bool>>>,
    /// (i, j) within a window -> row of the (2M-1)^2 bias table.
    pub rel_index: Vec<usize>,
}

/// Row-major tiling of an Nh x Nw grid into M x M windows; returns the token
/// index lists.
pub fn window_partition(grid: (usize, usize), window: usize) -> Result<Vec<Vec<usize>>> {
    let (nh, nw) = grid;
    if window == 0 || nh % window != 0 || nw % window != 0 {
        return Err(Error::InvalidArgument(format!(
            "grid {nh}x{nw} not divisible by window {window}"
        )));
    }
    let mut out = Vec::with_capacity((nh / window) * (nw / window));
    for wy in 0..nh / window {
        for wx in 0..nw / window {
            let mut idx = Vec::with_capacity(window * window);
            for dy in 0..window {
                for dx in 0..window {
                    idx.push((wy * window + dy) * nw + (wx * window + dx));
                }
            }
            out.push(idx);
        }
    }
    Ok(out)
}

/// Scatter per-window token rows back to grid order; the inverse of
/// gathering rows by [`window_partition`] indices.
pub fn window_reverse<T: Copy + Default>(
    windows: &[Vec<usize>],
    per_window: &[Vec<T>],
    n_tokens: usize,
    dim: usize,
) -> Vec<T> {
    let mut out = vec![T::default(); n_tokens * dim];
    for (idx, rows) in windows.iter().zip(per_window) {
        for (slot, &tok) in idx.iter().enumerate() {
            out[tok * dim..(tok + 1) * dim].copy_from_slice(&rows[slot * dim..(slot + 1) * dim]);
        }
    }
    out
}

/// Additive attention masks for a cyclically shifted grid: pairs of tokens
/// that originated in different pre-shift regions get -inf. One entry per
/// window; `None` means no masking applies.
pub fn shifted_attention_mask(
    grid: (usize, usize),
    window: usize,
    shift: usize,
) -> Result<Vec<Option<Vec<f64>>>> {
    let geom = WindowGeometry::new(grid, window, shift)?;
    Ok(geom
        .masks
        .iter()
        .map(|m| {
            m.as_ref().map(|allowed| {
                allowed
                    .iter()
                    .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
                    .collect()
            })
        })
        .collect())
}

impl WindowGeometry {
    pub fn new(grid: (usize, usize), window: usize, shift: usize) -> Result<Self> {
        let (nh, nw) = grid;
        if shift >= window {
            return Err(Error::InvalidArgument(format!(
                "shift {shift} must be smaller than window {window}"
            )));
        }
        let windows = window_partition(grid, window)?;
        let n = nh * nw;

        let (shift_map, inv_shift_map, masks) = if shift == 0 {
            (
                (0..n).collect(),
                (0..n).collect(),
                vec![None; windows.len()],
            )
        } else {
            // Position (y, x) of the shifted layout holds original token
            // ((y+s) mod nh, (x+s) mod nw).
            let mut fwd = vec![0usize; n];
            let mut inv = vec![0usize; n];
            for y in 0..nh {
                for x in 0..nw {
                    let src = ((y + shift) % nh) * nw + (x + shift) % nw;
                    fwd[y * nw + x] = src;
                    inv[src] = y * nw + x;
                }
            }
            // Band labels on the shifted layout: tokens whose originals sit
            // in different bands must not attend.
            let band = |pos: usize, len: usize| -> usize {
                if pos < len - window {
                    0
                } else if pos < len - shift {
                    1
                } else {
                    2
                }
            };
            let label = |tok: usize| -> usize {
                let (y, x) = (tok / nw, tok % nw);
                band(y, nh) * 3 + band(x, nw)
            };
            let masks = windows
                .iter()
                .map(|idx| {
                    let labels: Vec<usize> = idx.iter().map(|&t| label(t)).collect();
                    if labels.windows(2).all(|w| w[0] == w[1]) {
                        None
                    } else {
                        let m2 = idx.len();
                        let mut allowed = vec![false; m2 * m2];
                        for i in 0..m2 {
                            for j in 0..m2 {
                                allowed[i * m2 + j] = labels[i] == labels[j];
                            }
                        }
                        Some(allowed)
                    }
                })
                .collect();
            (fwd, inv, masks)
        };

        let side = 2 * window - 1;
        let mut rel_index = vec![0usize; window * window * window * window];
        for yi in 0..window {
            for xi in 0..window {
                for yj in 0..window {
                    for xj in 0..window {
                        let i = yi * window + xi;
                        let j = yj * window + xj;
                        let dy = yi + window - 1 - yj;
                        let dx = xi + window - 1 - xj;
                        rel_index[i * window * window + j] = dy * side + dx;
                    }
                }
            }
        }

        Ok(WindowGeometry {
            grid,
            window,
            shift,
            windows,
            shift_map,
            inv_shift_map,
            masks,
            rel_index,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    pub fn bias_rows(&self) -> usize {
        (2 * self.window - 1) * (2 * self.window - 1)
    }
}

/// Apply a permutation map: out[i] = x[map[i]] on rows of width `dim`.
pub fn permute_rows<T: Copy + Default>(x: &[T], map: &[usize], dim: usize) -> Vec<T> {
    let mut out = vec![T::default(); x.len()];
    for (i, &src) in map.iter().enumerate() {
        out[i * dim..(i + 1) * dim].copy_from_slice(&x[src * dim..(src + 1) * dim]);
    }
    out
}

/// Parameter names for one attention module.
#[derive(Clone, Debug)]
pub struct AttnParams {
    pub wq: super::Linear,
    pub wk: super::Linear,
    pub wv: super::Linear,
    pub proj: super::Linear,
    pub rel_bias: String,
    pub dim: usize,
    pub heads: usize,
    pub use_rel_bias: bool,
}

impl AttnParams {
    pub fn new(prefix: &str, dim: usize, heads: usize, use_rel_bias: bool) -> Self {
        AttnParams {
            wq: super::Linear::new(&format!("{prefix}.wq"), dim, dim),
            wk: super::Linear::new(&format!("{prefix}.wk"), dim, dim),
            wv: super::Linear::new(&format!("{prefix}.wv"), dim, dim),
            proj: super::Linear::new(&format!("{prefix}.proj"), dim, dim),
            rel_bias: format!("{prefix}.rel_bias"),
            dim,
            heads,
            use_rel_bias,
        }
    }

    pub fn specs(&self, window: usize) -> Vec<TensorSpec> {
        let side = 2 * window - 1;
        let mut v = Vec::new();
        v.extend(self.wq.specs());
        v.extend(self.wk.specs());
        v.extend(self.wv.specs());
        v.extend(self.proj.specs());
        v.push(TensorSpec::new(
            &self.rel_bias,
            &[side * side, self.heads],
            Init::Zeros,
        ));
        v
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Debug)]
pub struct AttnCache<T> {
    /// Input tokens (post-norm, post-shift), n x C.
    pub input: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Softmax probabilities, window-major then head-major, each M^2 x M^2.
    pub probs: Vec<T>,
    /// Concatenated head outputs before the output projection, n x C.
    pub pre_proj: Vec<T>,
}

/// Multi-window attention forward over tokens laid out per `geom`.
pub fn attention_forward<T: Scalar>(
    params: &ParamStore<T>,
    attn: &AttnParams,
    geom: &WindowGeometry,
    x: &[T],
) -> (Vec<T>, AttnCache<T>) {
    let n = geom.n_tokens();
    let c = attn.dim;
    let h = attn.heads;
    let dh = attn.head_dim();
    let m2 = geom.tokens_per_window();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    debug_assert_eq!(x.len(), n * c);

    let q = attn.wq.forward(params, x, n);
    let k = attn.wk.forward(params, x, n);
    let v = attn.wv.forward(params, x, n);
    let bias = params.get(&attn.rel_bias).data();

    let mut probs = vec![T::zero(); geom.windows.len() * h * m2 * m2];
    let mut pre_proj = vec![T::zero(); n * c];
    let mut qw = vec![T::zero(); m2 * c];
    let mut kw = vec![T::zero(); m2 * c];
    let mut vw = vec![T::zero(); m2 * c];

    for (w_idx, win) in geom.windows.iter().enumerate() {
        for (slot, &tok) in win.iter().enumerate() {
            qw[slot * c..(slot + 1) * c].copy_from_slice(&q[tok * c..(tok + 1) * c]);
            kw[slot * c..(slot + 1) * c].copy_from_slice(&k[tok * c..(tok + 1) * c]);
            vw[slot * c..(slot + 1) * c].copy_from_slice(&v[tok * c..(tok + 1) * c]);
        }
        let mask = geom.masks[w_idx].as_deref();
        let mut ow = vec![T::zero(); m2 * c];
        for a in 0..h {
            let p_off = (w_idx * h + a) * m2 * m2;
            let scores = &mut probs[p_off..p_off + m2 * m2];
            // scores = Qa Ka^T
            T::gemm_acc(
                m2,
                dh,
                m2,
                &qw[a * dh..],
                c as isize,
                1,
                &kw[a * dh..],
                1,
                c as isize,
                T::zero(),
                scores,
                m2 as isize,
                1,
            );
            for i in 0..m2 {
                for j in 0..m2 {
                    let mut s = scores[i * m2 + j] * scale;
                    if attn.use_rel_bias {
                        s = s + bias[geom.rel_index[i * m2 + j] * h + a];
                    }
                    if let Some(mask) = mask {
                        if !mask[i * m2 + j] {
                            s = T::neg_infinity();
                        }
                    }
                    scores[i * m2 + j] = s;
                }
            }
            softmax_rows(scores, m2);
            // Oa = A Va, written into the head's column block of ow.
            T::gemm_acc(
                m2,
                m2,
                dh,
                scores,
                m2 as isize,
                1,
                &vw[a * dh..],
                c as isize,
                1,
                T::zero(),
                &mut ow[a * dh..],
                c as isize,
                1,
            );
        }
        for (slot, &tok) in win.iter().enumerate() {
            pre_proj[tok * c..(tok + 1) * c].copy_from_slice(&ow[slot * c..(slot + 1) * c]);
        }
    }

    let out = attn.proj.forward(params, &pre_proj, n);
    (
        out,
        AttnCache {
            input: x.to_vec(),
            q,
            k,
            v,
            probs,
            pre_proj,
        },
    )
}

/// Backward pass of [`attention_forward`]; returns d(input).
pub fn attention_backward<T: Scalar>(
    params: &ParamStore<T>,
    grads: &mut GradStore<T>,
    attn: &AttnParams,
    geom: &WindowGeometry,
    cache: &AttnCache<T>,
    dy: &[T],
) -> Vec<T> {
    let n = geom.n_tokens();
    let c = attn.dim;
    let h = attn.heads;
    let dh = attn.head_dim();
    let m2 = geom.tokens_per_window();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());

    let d_pre = attn.proj.backward(params, grads, &cache.pre_proj, dy, n);

    let mut dq = vec![T::zero(); n * c];
    let mut dk = vec![T::zero(); n * c];
    let mut dv = vec![T::zero(); n * c];
    let mut dbias = Tensor::<T>::zeros(&[geom.bias_rows(), h]);

    let mut qw = vec![T::zero(); m2 * c];
    let mut kw = vec![T::zero(); m2 * c];
    let mut vw = vec![T::zero(); m2 * c];
    let mut dow = vec![T::zero(); m2 * c];
    let mut dqw = vec![T::zero(); m2 * c];
    let mut dkw = vec![T::zero(); m2 * c];
    let mut dvw = vec![T::zero(); m2 * c];
    let mut ds = vec![T::zero(); m2 * m2];

    for (w_idx, win) in geom.windows.iter().enumerate() {
        for (slot, &tok) in win.iter().enumerate() {
            qw[slot * c..(slot + 1) * c].copy_from_slice(&cache.q[tok * c..(tok + 1) * c]);
            kw[slot * c..(slot + 1) * c].copy_from_slice(&cache.k[tok * c..(tok + 1) * c]);
            vw[slot * c..(slot + 1) * c].copy_from_slice(&cache.v[tok * c..(tok + 1) * c]);
            dow[slot * c..(slot + 1) * c].copy_from_slice(&d_pre[tok * c..(tok + 1) * c]);
        }
        for a in 0..h {
            let p_off = (w_idx * h + a) * m2 * m2;
            let probs = &cache.probs[p_off..p_off + m2 * m2];
            // dA = dOa Va^T
            T::gemm_acc(
                m2,
                dh,
                m2,
                &dow[a * dh..],
                c as isize,
                1,
                &vw[a * dh..],
                1,
                c as isize,
                T::zero(),
                &mut ds,
                m2 as isize,
                1,
            );
            // dVa = A^T dOa
            T::gemm_acc(
                m2,
                m2,
                dh,
                probs,
                1,
                m2 as isize,
                &dow[a * dh..],
                c as isize,
                1,
                T::zero(),
                &mut dvw[a * dh..],
                c as isize,
                1,
            );
            softmax_rows_backward(probs, &mut ds, m2);
            if attn.use_rel_bias {
                let db = dbias.data_mut();
                for ij in 0..m2 * m2 {
                    let row = geom.rel_index[ij];
                    db[row * h + a] = db[row * h + a] + ds[ij];
                }
            }
            for s in ds.iter_mut() {
                *s = *s * scale;
            }
            // dQa = dS Ka
            T::gemm_acc(
                m2,
                m2,
                dh,
                &ds,
                m2 as isize,
                1,
                &kw[a * dh..],
                c as isize,
                1,
                T::zero(),
                &mut dqw[a * dh..],
                c as isize,
                1,
            );
            // dKa = dS^T Qa
            T::gemm_acc(
                m2,
                m2,
                dh,
                &ds,
                1,
                m2 as isize,
                &qw[a * dh..],
                c as isize,
                1,
                T::zero(),
                &mut dkw[a * dh..],
                c as isize,
                1,
            );
        }
        for (slot, &tok) in win.iter().enumerate() {
            dq[tok * c..(tok + 1) * c].copy_from_slice(&dqw[slot * c..(slot + 1) * c]);
            dk[tok * c..(tok + 1) * c].copy_from_slice(&dkw[slot * c..(slot + 1) * c]);
            dv[tok * c..(tok + 1) * c].copy_from_slice(&dvw[slot * c..(slot + 1) * c]);
        }
    }

    if attn.use_rel_bias {
        grads.accum(&attn.rel_bias, dbias);
    }

    let mut dx = attn.wq.backward(params, grads, &cache.input, &dq, n);
    let dxk = attn.wk.backward(params, grads, &cache.input, &dk, n);
    let dxv = attn.wv.backward(params, grads, &cache.input, &dv, n);
    for ((a, b), c_) in dx.iter_mut().zip(dxk).zip(dxv) {
        *a = *a + b + c_;
    }
    dx
}

/// Attention over one standalone window. `add_mask`, when
/// present, is an M^2 x M^2 additive matrix (0 or -inf entries).
pub fn attention<T: Scalar>(
    params: &ParamStore<T>,
    attn: &AttnParams,
    window: usize,
    x: &[T],
    add_mask: Option<&[f64]>,
) -> Result<Vec<T>> {
    let mut geom = WindowGeometry::new((window, window), window, 0)?;
    if let Some(mask) = add_mask {
        let m2 = window * window;
        if mask.len() != m2 * m2 {
            return Err(Error::InvalidArgument(format!(
                "mask length {} does not match window {window}",
                mask.len()
            )));
        }
        geom.masks[0] = Some(mask.iter().map(|&v| v != f64::NEG_INFINITY).collect());
    }
    if x.len() != geom.n_tokens() * attn.dim {
        return Err(Error::InvalidArgument(format!(
            "token buffer length {} does not match window {window} and dim {}",
            x.len(),
            attn.dim
        )));
    }
    Ok(attention_forward(params, attn, &geom, x).0)
}
