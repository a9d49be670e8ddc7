//! Patch tokenization, random masking, and reconstruction targets.

use rand::Rng;

use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Tokenized image: row-major grid of flattened pixel patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    /// Nh * Nw rows of length D = p*p*c.
    pub tokens: Vec<f32>,
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn n_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn token(&self, idx: usize) -> &[f32] {
        let d = self.token_dim();
        &self.tokens[idx * d..(idx + 1) * d]
    }
}

/// The exact set of masked patch indices and the seed that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub ratio_milli: u32,
    pub masked_indices: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn is_masked(&self, idx: usize) -> bool {
        self.masked_indices.binary_search(&idx).is_ok()
    }

    /// Membership bitmap over n patches.
    pub fn bitmap(&self, n_patches: usize) -> Vec<bool> {
        let mut m = vec![false; n_patches];
        for &i in &self.masked_indices {
            m[i] = true;
        }
        m
    }
}

/// Split an image into p x p patches, each flattened row-major
/// (rows, then columns, then channels).
pub fn patchify(image: &ImageRecord, p: usize) -> Result<PatchGrid> {
    let (h, w, c) = image.dims();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} not divisible by patch size {p}"
        )));
    }
    let (nh, nw) = (h / p, w / p);
    let d = p * p * c;
    let mut tokens = vec![0.0f32; nh * nw * d];
    for ti in 0..nh {
        for tj in 0..nw {
            let tok = &mut tokens[(ti * nw + tj) * d..(ti * nw + tj + 1) * d];
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        tok[k] = image.pixel(ti * p + dy, tj * p + dx, ch);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        tokens,
        grid: (nh, nw),
        patch_size: p,
        channels: c,
    })
}

/// Exact inverse of [`patchify`]: reassemble H x W x c pixels.
pub fn unpatchify(grid: &PatchGrid) -> Result<Vec<f32>> {
    let (nh, nw) = grid.grid;
    let p = grid.patch_size;
    let c = grid.channels;
    let d = p * p * c;
    if grid.tokens.len() != nh * nw * d {
        return Err(Error::InvalidArgument(format!(
            "token buffer length {} inconsistent with grid {:?} and D {}",
            grid.tokens.len(),
            grid.grid,
            d
        )));
    }
    let (h, w) = (nh * p, nw * p);
    let mut pixels = vec![0.0f32; h * w * c];
    for ti in 0..nh {
        for tj in 0..nw {
            let tok = grid.token(ti * nw + tj);
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        pixels[((ti * p + dy) * w + (tj * p + dx)) * c + ch] = tok[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(pixels)
}

/// round() half away from zero.
pub fn mask_count(n_patches: usize, ratio: f64) -> usize {
    (ratio * n_patches as f64).round() as usize
}

/// Uniform sample without replacement of round(ratio * n) patch indices,
/// fully determined by the seed.
pub fn sample_mask(n_patches: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if n_patches == 0 {
        return Err(Error::InvalidArgument("no patches to mask".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {ratio} outside (0, 1)"
        )));
    }
    let k = mask_count(n_patches, ratio);
    if k == 0 || k == n_patches {
        return Err(Error::InvalidArgument(format!(
            "mask of {k} out of {n_patches} patches leaves nothing to learn"
        )));
    }
    let mut rng = rng_from(seed, "mask", &[]);
    // Partial Fisher-Yates: first k slots are the sample.
    let mut pool: Vec<usize> = (0..n_patches).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n_patches);
        pool.swap(i, j);
    }
    let mut masked: Vec<usize> = pool[..k].to_vec();
    masked.sort_unstable();
    Ok(MaskPlan {
        ratio_milli: (ratio * 1000.0).round() as u32,
        masked_indices: masked,
        seed,
    })
}

/// Replace masked rows of an embedded token grid with the mask token;
/// unmasked rows pass through bitwise unchanged.
pub fn apply_mask(
    tokens: &[f32],
    n_tokens: usize,
    dim: usize,
    plan: &MaskPlan,
    mask_token: &[f32],
) -> Result<Vec<f32>> {
    if tokens.len() != n_tokens * dim || mask_token.len() != dim {
        return Err(Error::InvalidArgument(
            "token buffer or mask token has inconsistent dimensions".into(),
        ));
    }
    if let Some(&bad) = plan.masked_indices.iter().find(|&&i| i >= n_tokens) {
        return Err(Error::InvalidArgument(format!(
            "mask index {bad} out of range for {n_tokens} tokens"
        )));
    }
    let mut out = tokens.to_vec();
    for &i in &plan.masked_indices {
        out[i * dim..(i + 1) * dim].copy_from_slice(mask_token);
    }
    Ok(out)
}

pub const TARGET_VAR_EPS: f32 = 1e-6;

/// Raw pixel-patch regression targets; optionally standardized per patch.
pub fn reconstruction_target(
    image: &ImageRecord,
    p: usize,
    patch_norm_target: bool,
) -> Result<PatchGrid> {
    let mut grid = patchify(image, p)?;
    if patch_norm_target {
        let d = grid.token_dim();
        for tok in grid.tokens.chunks_mut(d) {
            let mean = tok.iter().sum::<f32>() / d as f32;
            let var = tok.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rstd = 1.0 / (var + TARGET_VAR_EPS).sqrt();
            for v in tok.iter_mut() {
                *v = (*v - mean) * rstd;
            }
        }
    }
    Ok(grid)
}
