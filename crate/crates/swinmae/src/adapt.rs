//! Downstream models and weight-transfer policies: a U-shaped segmenter with
//! skip connections, an encoder + pooled-head classifier, and the audited
//! surgery that moves pretrained tensors into them.

use serde::{Deserialize, Serialize};

use crate::ckpt::NamedTensorStore;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::block::BlockCache;
use crate::nn::encoder::{Encoder, EncoderCache};
use crate::nn::norm::LnCache;
use crate::nn::resample::{FinalExpand, PatchExpand};
use crate::nn::{BlockLayout, LayerNorm, Linear};
use crate::store::{GradStore, ParamStore, TensorSpec};
use crate::tensor::{Scalar, Tensor};

/// Which pretrained tensors a downstream model receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferPolicy {
    /// Encoder and reconstruction-decoder weights both transfer.
    #[serde(rename = "RADIOLOGICAL_SEG")]
    RadiologicalSeg,
    /// Encoder only; the segmentation decoder starts random.
    #[serde(rename = "COLOR_SEG")]
    ColorSeg,
    /// Encoder only; the classification head starts random.
    #[serde(rename = "CLASSIFY")]
    Classify,
}

impl TransferPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransferPolicy::RadiologicalSeg => "RADIOLOGICAL_SEG",
            TransferPolicy::ColorSeg => "COLOR_SEG",
            TransferPolicy::Classify => "CLASSIFY",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferStatus {
    #[serde(rename = "TRANSFERRED")]
    Transferred,
    #[serde(rename = "RANDOM_INIT")]
    RandomInit,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferEntry {
    pub tensor: String,
    pub status: TransferStatus,
    pub source: Option<String>,
    pub shape: Vec<usize>,
}

/// Audit of one weight-transfer application: every downstream tensor appears
/// exactly once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferReport {
    pub policy: TransferPolicy,
    /// Prominent note on the deep-stage block selection.
    pub note: String,
    pub entries: Vec<TransferEntry>,
}

impl TransferReport {
    pub fn transferred(&self) -> impl Iterator<Item = &TransferEntry> {
        self.entries
            .iter()
            .filter(|e| e.status == TransferStatus::Transferred)
    }
}

/// Index of the deepened encoder stage and how many of its blocks take
/// pretrained weights: the first two, keeping the W-MSA/SW-MSA phase.
pub const PARTIAL_STAGE: usize = 2;
pub const PARTIAL_BLOCKS: usize = 2;

// ---------------------------------------------------------------------------
// Segmentation model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SegDecStage {
    pub expand: PatchExpand,
    pub skip_reduce: Linear,
    pub blocks: Vec<BlockLayout>,
}

/// U-shaped segmenter: deepened encoder, mirrored decoder with skip
/// connections, final expansion back to pixel resolution, per-pixel head.
#[derive(Clone, Debug)]
pub struct SegModel<T> {
    pub cfg: ModelConfig,
    pub n_classes: usize,
    pub encoder: Encoder,
    pub stages: Vec<SegDecStage>,
    pub final_expand: FinalExpand,
    pub head: Linear,
    pub params: ParamStore<T>,
}

pub struct SegCache<T> {
    pub enc: EncoderCache<T>,
    pub enc_outs: Vec<Vec<T>>,
    pub stages: Vec<SegStageCache<T>>,
    pub final_in: Vec<T>,
    pub head_in: Vec<T>,
}

pub struct SegStageCache<T> {
    pub expand_in: Vec<T>,
    pub concat: Vec<T>,
    pub blocks: Vec<BlockCache<T>>,
}

impl<T: Scalar> SegModel<T> {
    /// Encoder depths switch to the downstream pattern (third stage deepened
    /// to 6 blocks).
    pub fn build(base_cfg: &ModelConfig, n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Config(
                "segmentation needs at least 2 classes".into(),
            ));
        }
        let cfg = base_cfg.downstream();
        cfg.validate()?;
        let encoder = Encoder::from_config("encoder", &cfg)?;
        let enc_stages = cfg.enc_stages();
        let dec_stages = cfg.dec_stages();

        let mut stages = Vec::with_capacity(dec_stages.len());
        let mut prev_grid = enc_stages.last().expect("validated").grid;
        let mut prev_dim = enc_stages.last().unwrap().dim;
        for (d, st) in dec_stages.iter().enumerate() {
            let prefix = format!("seg_decoder.stage{d}");
            let expand = PatchExpand::new(&format!("{prefix}.expand"), prev_grid, prev_dim)?;
            // Skip fusion: concatenated [decoder | encoder] channels reduced
            // back to the stage width.
            let skip_reduce = Linear::new(&format!("{prefix}.skip_reduce"), 2 * st.dim, st.dim);
            let blocks = (0..st.depth)
                .map(|b| {
                    let shift = if b % 2 == 1 { st.shift } else { 0 };
                    BlockLayout::new(
                        &format!("{prefix}.block{b}"),
                        st.grid,
                        st.dim,
                        st.heads,
                        st.window,
                        shift,
                        cfg.mlp_ratio,
                        cfg.use_rel_bias,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            prev_grid = st.grid;
            prev_dim = st.dim;
            stages.push(SegDecStage {
                expand,
                skip_reduce,
                blocks,
            });
        }
        let final_expand = FinalExpand::new(
            "seg_decoder.final_expand",
            cfg.token_grid(),
            cfg.embed_dim,
            cfg.patch,
        );
        let head = Linear::new("seg_head", cfg.embed_dim, n_classes);

        let mut specs = encoder.specs();
        for s in &stages {
            specs.extend(s.expand.specs());
            specs.extend(s.skip_reduce.specs());
            for b in &s.blocks {
                specs.extend(b.specs());
            }
        }
        specs.extend(final_expand.specs());
        specs.extend(head.specs());
        let params = ParamStore::init(&specs, seed)?;
        Ok(SegModel {
            cfg,
            n_classes,
            encoder,
            stages,
            final_expand,
            head,
            params,
        })
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        let mut specs = self.encoder.specs();
        for s in &self.stages {
            specs.extend(s.expand.specs());
            specs.extend(s.skip_reduce.specs());
            for b in &s.blocks {
                specs.extend(b.specs());
            }
        }
        specs.extend(self.final_expand.specs());
        specs.extend(self.head.specs());
        specs
    }

    /// Per-pixel logits, H*W rows by n_classes.
    pub fn forward(&self, raw_patches: &[T]) -> (Vec<T>, SegCache<T>) {
        let (enc_outs, enc_cache) = self.encoder.forward(&self.params, raw_patches, |_| {});
        let n_stages = enc_outs.len();
        let mut cur = enc_outs.last().expect("stages nonempty").clone();
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for (d, st) in self.stages.iter().enumerate() {
            let (expanded, expand_in) = st.expand.forward(&self.params, &cur);
            let skip = &enc_outs[n_stages - 2 - d];
            let dim = st.expand.out_dim();
            let rows = expanded.len() / dim;
            debug_assert_eq!(skip.len(), expanded.len());
            let mut concat = vec![T::zero(); rows * 2 * dim];
            for r in 0..rows {
                concat[r * 2 * dim..r * 2 * dim + dim]
                    .copy_from_slice(&expanded[r * dim..(r + 1) * dim]);
                concat[r * 2 * dim + dim..(r + 1) * 2 * dim]
                    .copy_from_slice(&skip[r * dim..(r + 1) * dim]);
            }
            cur = st.skip_reduce.forward(&self.params, &concat, rows);
            let mut blocks = Vec::with_capacity(st.blocks.len());
            for b in &st.blocks {
                let (next, bc) = b.forward(&self.params, &cur);
                blocks.push(bc);
                cur = next;
            }
            stage_caches.push(SegStageCache {
                expand_in,
                concat,
                blocks,
            });
        }
        let (full, final_in) = self.final_expand.forward(&self.params, &cur);
        let (h, w) = self.cfg.image_size;
        let logits = self.head.forward(&self.params, &full, h * w);
        (
            logits,
            SegCache {
                enc: enc_cache,
                enc_outs,
                stages: stage_caches,
                final_in,
                head_in: full,
            },
        )
    }

    pub fn backward(&self, cache: &SegCache<T>, d_logits: &[T]) -> GradStore<T> {
        let mut grads = GradStore::new();
        let (h, w) = self.cfg.image_size;
        let d_full = self
            .head
            .backward(&self.params, &mut grads, &cache.head_in, d_logits, h * w);
        let mut d_cur =
            self.final_expand
                .backward(&self.params, &mut grads, &cache.final_in, &d_full);

        let n_stages = self.encoder.stages.len();
        let mut d_stages: Vec<Vec<T>> = vec![Vec::new(); n_stages];
        for (d, (st, sc)) in self.stages.iter().zip(&cache.stages).enumerate().rev() {
            for (b, bc) in st.blocks.iter().zip(&sc.blocks).rev() {
                d_cur = b.backward(&self.params, &mut grads, bc, &d_cur);
            }
            let dim = st.expand.out_dim();
            let rows = d_cur.len() / dim;
            let d_concat =
                st.skip_reduce
                    .backward(&self.params, &mut grads, &sc.concat, &d_cur, rows);
            let mut d_expanded = vec![T::zero(); rows * dim];
            let mut d_skip = vec![T::zero(); rows * dim];
            for r in 0..rows {
                d_expanded[r * dim..(r + 1) * dim]
                    .copy_from_slice(&d_concat[r * 2 * dim..r * 2 * dim + dim]);
                d_skip[r * dim..(r + 1) * dim]
                    .copy_from_slice(&d_concat[r * 2 * dim + dim..(r + 1) * 2 * dim]);
            }
            d_stages[n_stages - 2 - d] = d_skip;
            d_cur = st
                .expand
                .backward(&self.params, &mut grads, &sc.expand_in, &d_expanded);
        }
        d_stages[n_stages - 1] = d_cur;
        let d_embedded = self
            .encoder
            .backward(&self.params, &mut grads, &cache.enc, d_stages);
        self.encoder
            .backward_embed(&self.params, &mut grads, &cache.enc, &d_embedded);
        grads
    }
}

// ---------------------------------------------------------------------------
// Classification model
// ---------------------------------------------------------------------------

/// Encoder, final LayerNorm, spatial mean pool, linear head.
#[derive(Clone, Debug)]
pub struct ClsModel<T> {
    pub cfg: ModelConfig,
    pub n_classes: usize,
    pub encoder: Encoder,
    pub norm: LayerNorm,
    pub head: Linear,
    pub params: ParamStore<T>,
}

pub struct ClsCache<T> {
    pub enc: EncoderCache<T>,
    pub ln: LnCache<T>,
    pub normed_rows: usize,
    pub pooled: Vec<T>,
}

impl<T: Scalar> ClsModel<T> {
    pub fn build(base_cfg: &ModelConfig, n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Config(
                "classification needs at least 2 classes".into(),
            ));
        }
        let cfg = base_cfg.downstream();
        cfg.validate()?;
        let encoder = Encoder::from_config("encoder", &cfg)?;
        let last_dim = cfg.enc_stages().last().expect("validated").dim;
        let norm = LayerNorm::new("cls_norm", last_dim);
        let head = Linear::new("cls_head", last_dim, n_classes);
        let mut specs = encoder.specs();
        specs.extend(norm.specs());
        specs.extend(head.specs());
        let params = ParamStore::init(&specs, seed)?;
        Ok(ClsModel {
            cfg,
            n_classes,
            encoder,
            norm,
            head,
            params,
        })
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        let mut specs = self.encoder.specs();
        specs.extend(self.norm.specs());
        specs.extend(self.head.specs());
        specs
    }

    pub fn forward(&self, raw_patches: &[T]) -> (Vec<T>, ClsCache<T>) {
        let (enc_outs, enc_cache) = self.encoder.forward(&self.params, raw_patches, |_| {});
        let last = enc_outs.last().expect("stages nonempty");
        let dim = self.norm.dim;
        let rows = last.len() / dim;
        let (normed, ln) = self.norm.forward(&self.params, last, rows);
        let inv = T::one() / T::from_f64(rows as f64);
        let mut pooled = vec![T::zero(); dim];
        for row in normed.chunks(dim) {
            for (p, v) in pooled.iter_mut().zip(row) {
                *p = *p + *v * inv;
            }
        }
        let logits = self.head.forward(&self.params, &pooled, 1);
        (
            logits,
            ClsCache {
                enc: enc_cache,
                ln,
                normed_rows: rows,
                pooled,
            },
        )
    }

    pub fn backward(&self, cache: &ClsCache<T>, d_logits: &[T]) -> GradStore<T> {
        let mut grads = GradStore::new();
        let d_pooled = self
            .head
            .backward(&self.params, &mut grads, &cache.pooled, d_logits, 1);
        let rows = cache.normed_rows;
        let dim = self.norm.dim;
        let inv = T::one() / T::from_f64(rows as f64);
        let mut d_normed = vec![T::zero(); rows * dim];
        for r in 0..rows {
            for c in 0..dim {
                d_normed[r * dim + c] = d_pooled[c] * inv;
            }
        }
        let d_last = self
            .norm
            .backward(&self.params, &mut grads, &cache.ln, &d_normed, rows);
        let mut d_stages: Vec<Vec<T>> = vec![Vec::new(); self.encoder.stages.len()];
        *d_stages.last_mut().expect("stages nonempty") = d_last;
        let d_embedded = self
            .encoder
            .backward(&self.params, &mut grads, &cache.enc, d_stages);
        self.encoder
            .backward_embed(&self.params, &mut grads, &cache.enc, &d_embedded);
        grads
    }
}

// ---------------------------------------------------------------------------
// Weight transfer
// ---------------------------------------------------------------------------

/// Fields that must agree between the pretrained checkpoint and a downstream
/// model for tensor shapes and window geometry to line up.
pub fn check_transfer_compat(upstream: &ModelConfig, downstream: &ModelConfig) -> Result<()> {
    let mismatch = |what: &str| {
        Err(Error::Config(format!(
            "checkpoint incompatible with downstream model: {what} differs"
        )))
    };
    if upstream.patch != downstream.patch {
        return mismatch("patch size");
    }
    if upstream.embed_dim != downstream.embed_dim {
        return mismatch("embedding width");
    }
    if upstream.window != downstream.window {
        return mismatch("window size");
    }
    if upstream.enc_heads != downstream.enc_heads {
        return mismatch("head counts");
    }
    if upstream.image_size != downstream.image_size {
        return mismatch("image size");
    }
    if upstream.in_channels != downstream.in_channels {
        return mismatch("input channels");
    }
    if upstream.mlp_ratio != downstream.mlp_ratio {
        return mismatch("mlp ratio");
    }
    if upstream.dec_depths != downstream.dec_depths {
        return mismatch("decoder depths");
    }
    Ok(())
}

/// Upstream source tensor for one downstream tensor under a policy, or None
/// for random initialization.
fn map_source(name: &str, policy: TransferPolicy) -> Option<String> {
    if name.starts_with("patch_embed.") {
        return Some(name.to_string());
    }
    if let Some(rest) = name.strip_prefix("encoder.") {
        // stage{S}.block{B}.suffix or stage{S}.merge.suffix
        let mut parts = rest.splitn(2, '.');
        let stage: usize = parts
            .next()
            .and_then(|s| s.strip_prefix("stage"))
            .and_then(|s| s.parse().ok())?;
        let tail = parts.next()?;
        if let Some(block_rest) = tail.strip_prefix("block") {
            let block: usize = block_rest.split('.').next()?.parse().ok()?;
            if stage == PARTIAL_STAGE && block >= PARTIAL_BLOCKS {
                return None;
            }
        }
        return Some(name.to_string());
    }
    if policy == TransferPolicy::RadiologicalSeg {
        if let Some(rest) = name.strip_prefix("seg_decoder.") {
            // Positional map onto the reconstruction decoder; fusion layers
            // and the final expansion have no upstream counterpart.
            if rest.contains(".skip_reduce.") || rest.starts_with("final_expand") {
                return None;
            }
            return Some(format!("decoder.{rest}"));
        }
    }
    None
}

/// Plan and apply a transfer into `params` (all-or-nothing), re-initializing
/// every unmapped tensor from its spec with `seed`.
pub fn transfer_weights<T: Scalar>(
    ckpt: &NamedTensorStore,
    params: &mut ParamStore<T>,
    specs: &[TensorSpec],
    policy: TransferPolicy,
    seed: u64,
) -> Result<TransferReport> {
    let has_seg = specs.iter().any(|s| s.name.starts_with("seg_decoder."));
    let has_cls = specs.iter().any(|s| s.name.starts_with("cls_"));
    match policy {
        TransferPolicy::Classify if has_seg => {
            return Err(Error::InvalidArgument(
                "CLASSIFY policy applied to a segmentation model".into(),
            ))
        }
        TransferPolicy::RadiologicalSeg | TransferPolicy::ColorSeg if has_cls => {
            return Err(Error::InvalidArgument(
                "segmentation policy applied to a classification model".into(),
            ))
        }
        _ => {}
    }

    // Validate the full plan before touching any tensor.
    let mut sorted: Vec<&TensorSpec> = specs.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let mut plan: Vec<(&TensorSpec, Option<String>)> = Vec::with_capacity(sorted.len());
    for spec in sorted {
        match map_source(&spec.name, policy) {
            Some(src) => {
                let t = ckpt
                    .get(&src)
                    .ok_or_else(|| Error::MissingTensor(src.clone()))?;
                if t.shape() != spec.shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        name: spec.name.clone(),
                        expected: spec.shape.clone(),
                        got: t.shape().to_vec(),
                    });
                }
                plan.push((spec, Some(src)));
            }
            None => plan.push((spec, None)),
        }
    }

    let mut entries = Vec::with_capacity(plan.len());
    for (spec, src) in plan {
        match &src {
            Some(src_name) => {
                let t = ckpt.get(src_name).expect("validated above");
                let cast: Tensor<T> = t.map_cast();
                params.insert(spec.name.clone(), cast);
                entries.push(TransferEntry {
                    tensor: spec.name.clone(),
                    status: TransferStatus::Transferred,
                    source: Some(src_name.clone()),
                    shape: spec.shape.clone(),
                });
            }
            None => {
                params.insert(
                    spec.name.clone(),
                    crate::nn::init::init_tensor::<T>(spec, seed),
                );
                entries.push(TransferEntry {
                    tensor: spec.name.clone(),
                    status: TransferStatus::RandomInit,
                    source: None,
                    shape: spec.shape.clone(),
                });
            }
        }
    }

    Ok(TransferReport {
        policy,
        note: format!(
            "encoder stage {PARTIAL_STAGE}: blocks 0..{PARTIAL_BLOCKS} carry pretrained weights, \
             blocks {PARTIAL_BLOCKS}..6 randomly initialized"
        ),
        entries,
    })
}

/// Re-read the checkpoint and assert bitwise equality of every transferred
/// tensor. Returns the names that differ (empty = pass), first mismatch
/// first.
pub fn verify_transfer<T: Scalar>(
    ckpt: &NamedTensorStore,
    params: &ParamStore<T>,
    report: &TransferReport,
) -> Vec<String> {
    let mut failures = Vec::new();
    for e in report.transferred() {
        let src = e.source.as_ref().expect("transferred entries have sources");
        let expected = match ckpt.get(src) {
            Some(t) => t,
            None => {
                failures.push(e.tensor.clone());
                continue;
            }
        };
        let actual = match params.try_get(&e.tensor) {
            Some(t) => t,
            None => {
                failures.push(e.tensor.clone());
                continue;
            }
        };
        let same = actual.len() == expected.len()
            && actual
                .data()
                .iter()
                .zip(expected.data())
                .all(|(a, b)| (a.into_f64() as f32).to_bits() == b.to_bits());
        if !same {
            failures.push(e.tensor.clone());
        }
    }
    failures
}
