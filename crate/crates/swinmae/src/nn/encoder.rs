//! Hierarchical encoder: linear patch embedding, then stages of Swin blocks
//! separated by patch merges. Stage outputs are all retained for skip
//! connections downstream.

use crate::config::{ModelConfig, StageConfig};
use crate::error::Result;
use crate::store::{GradStore, ParamStore, TensorSpec};
use crate::tensor::Scalar;

use super::block::{BlockCache, BlockLayout};
use super::resample::{MergeCache, PatchMerge};
use super::Linear;

/// One stage: an optional leading merge plus alternating W-MSA / SW-MSA
/// blocks.
#[derive(Clone, Debug)]
pub struct StageLayout {
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<BlockLayout>,
    pub cfg: StageConfig,
}

impl StageLayout {
    pub fn new(
        prefix: &str,
        cfg: StageConfig,
        merge_from: Option<(usize, usize)>,
        use_rel_bias: bool,
        mlp_ratio: f64,
    ) -> Result<Self> {
        let merge = match merge_from {
            Some(grid) => Some(PatchMerge::new(
                &format!("{prefix}.merge"),
                grid,
                cfg.dim / 2,
            )?),
            None => None,
        };
        let blocks = (0..cfg.depth)
            .map(|b| {
                let shift = if b % 2 == 1 { cfg.shift } else { 0 };
                BlockLayout::new(
                    &format!("{prefix}.block{b}"),
                    cfg.grid,
                    cfg.dim,
                    cfg.heads,
                    cfg.window,
                    shift,
                    mlp_ratio,
                    use_rel_bias,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StageLayout { merge, blocks, cfg })
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        let mut v = Vec::new();
        if let Some(m) = &self.merge {
            v.extend(m.specs());
        }
        for b in &self.blocks {
            v.extend(b.specs());
        }
        v
    }

    /// Run only this stage's blocks (no merge); used for block-level
    /// equivalence checks after weight transfer.
    pub fn forward_blocks<T: Scalar>(&self, params: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let mut cur = x.to_vec();
        for b in &self.blocks {
            cur = b.forward(params, &cur).0;
        }
        cur
    }
}

#[derive(Clone, Debug)]
pub struct StageCache<T> {
    pub merge: Option<(Vec<T>, MergeCache<T>)>,
    pub blocks: Vec<BlockCache<T>>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: Linear,
    pub stages: Vec<StageLayout>,
    pub in_grid: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    /// Raw patch tokens fed to the embedding.
    pub patches: Vec<T>,
    pub stages: Vec<StageCache<T>>,
}

impl Encoder {
    pub fn from_config(prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let stages_cfg = cfg.enc_stages();
        let mut stages = Vec::with_capacity(stages_cfg.len());
        let mut prev_grid = cfg.token_grid();
        for (i, st) in stages_cfg.iter().enumerate() {
            let merge_from = (i > 0).then_some(prev_grid);
            stages.push(StageLayout::new(
                &format!("{prefix}.stage{i}"),
                *st,
                merge_from,
                cfg.use_rel_bias,
                cfg.mlp_ratio,
            )?);
            prev_grid = st.grid;
        }
        Ok(Encoder {
            embed: Linear::new("patch_embed", cfg.patch_dim(), cfg.embed_dim),
            stages,
            in_grid: cfg.token_grid(),
        })
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        let mut v = self.embed.specs();
        for s in &self.stages {
            v.extend(s.specs());
        }
        v
    }

    /// Embed raw patch tokens and run every stage; returns each stage's
    /// output (for skips) plus the cache. `mask_hook` may rewrite the
    /// embedded tokens before stage 0 (the autoencoder masks here).
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        patches: &[T],
        mask_hook: impl FnOnce(&mut Vec<T>),
    ) -> (Vec<Vec<T>>, EncoderCache<T>) {
        let n0 = self.in_grid.0 * self.in_grid.1;
        let mut cur = self.embed.forward(params, patches, n0);
        mask_hook(&mut cur);

        let mut outputs = Vec::with_capacity(self.stages.len());
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut sc = StageCache {
                merge: None,
                blocks: Vec::with_capacity(stage.blocks.len()),
            };
            if let Some(m) = &stage.merge {
                let input = std::mem::take(&mut cur);
                let (merged, mc) = m.forward(params, &input);
                sc.merge = Some((input, mc));
                cur = merged;
            }
            for b in &stage.blocks {
                let (next, bc) = b.forward(params, &cur);
                sc.blocks.push(bc);
                cur = next;
            }
            outputs.push(cur.clone());
            caches.push(sc);
        }
        (
            outputs,
            EncoderCache {
                patches: patches.to_vec(),
                stages: caches,
            },
        )
    }

    /// Backward through all stages. `d_stages` carries one gradient per
    /// stage output (skip connections contribute to earlier stages); entries
    /// may be empty when nothing flows into that stage from outside.
    /// Returns the gradient at the embedded (post-hook) tokens.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        grads: &mut GradStore<T>,
        cache: &EncoderCache<T>,
        mut d_stages: Vec<Vec<T>>,
    ) -> Vec<T> {
        assert_eq!(d_stages.len(), self.stages.len());
        let mut d_cur: Vec<T> = Vec::new();
        for (stage, sc) in self.stages.iter().zip(&cache.stages).rev() {
            let d_out = d_stages.pop().expect("one gradient per stage");
            if d_cur.is_empty() {
                d_cur = d_out;
            } else if !d_out.is_empty() {
                for (a, b) in d_cur.iter_mut().zip(&d_out) {
                    *a = *a + *b;
                }
            }
            for (b, bc) in stage.blocks.iter().zip(&sc.blocks).rev() {
                d_cur = b.backward(params, grads, bc, &d_cur);
            }
            if let Some(m) = &stage.merge {
                let (_input, mc) = sc.merge.as_ref().expect("cache matches layout");
                d_cur = m.backward(params, grads, mc, &d_cur);
            }
        }
        d_cur
    }

    /// Gradient of the embedding itself given d(embedded tokens).
    pub fn backward_embed<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        grads: &mut GradStore<T>,
        cache: &EncoderCache<T>,
        d_embedded: &[T],
    ) -> Vec<T> {
        let n0 = self.in_grid.0 * self.in_grid.1;
        self.embed
            .backward(params, grads, &cache.patches, d_embedded, n0)
    }
}
