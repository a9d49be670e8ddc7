//! Masked-autoencoder assembly: encoder + reconstructing decoder + masked
//! MSE objective + the self-supervised pretraining loop.

use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::nn::block::BlockCache;
use crate::nn::encoder::{Encoder, EncoderCache};
use crate::nn::resample::PatchExpand;
use crate::nn::{BlockLayout, Linear};
use crate::optim::{adamw_step, lr_at, OptState, ScheduleConfig};
use crate::patches::{patchify, reconstruction_target, sample_mask, MaskPlan};
use crate::rng::{derive_seed, permutation, rng_from};
use crate::store::{GradStore, Init, ParamStore, TensorSpec};
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct DecStage {
    pub expand: PatchExpand,
    pub blocks: Vec<BlockLayout>,
}

#[derive(Clone, Debug)]
pub struct MaeDecoder {
    pub stages: Vec<DecStage>,
    pub head: Linear,
}

/// Encoder + mask token + mirrored decoder + linear reconstruction head.
#[derive(Clone, Debug)]
pub struct MaeModel<T> {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: MaeDecoder,
    pub params: ParamStore<T>,
}

pub const MASK_TOKEN: &str = "mask_token";

fn build_decoder(cfg: &ModelConfig) -> Result<MaeDecoder> {
    let enc = cfg.enc_stages();
    let dec = cfg.dec_stages();
    let mut stages = Vec::with_capacity(dec.len());
    let mut prev_grid = enc.last().expect("validated config").grid;
    let mut prev_dim = enc.last().unwrap().dim;
    for (i, st) in dec.iter().enumerate() {
        let prefix = format!("decoder.stage{i}");
        let expand = PatchExpand::new(&format!("{prefix}.expand"), prev_grid, prev_dim)?;
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
        stages.push(DecStage { expand, blocks });
    }
    Ok(MaeDecoder {
        stages,
        head: Linear::new("recon_head", cfg.embed_dim, cfg.patch_dim()),
    })
}

#[derive(Debug)]
pub struct DecStageCache<T> {
    pub expand_in: Vec<T>,
    pub blocks: Vec<BlockCache<T>>,
}

#[derive(Debug)]
pub struct MaeCache<T> {
    pub plan: MaskPlan,
    pub enc: EncoderCache<T>,
    pub dec: Vec<DecStageCache<T>>,
    pub head_in: Vec<T>,
}

impl<T: Scalar> MaeModel<T> {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::from_config("encoder", cfg)?;
        let decoder = build_decoder(cfg)?;
        let mut specs = encoder.specs();
        specs.push(TensorSpec::new(MASK_TOKEN, &[cfg.embed_dim], Init::Zeros));
        for s in &decoder.stages {
            specs.extend(s.expand.specs());
            for b in &s.blocks {
                specs.extend(b.specs());
            }
        }
        specs.extend(decoder.head.specs());
        let params = ParamStore::init(&specs, seed)?;
        Ok(MaeModel {
            cfg: cfg.clone(),
            encoder,
            decoder,
            params,
        })
    }

    /// Rebuild the layout over an existing parameter store (checkpoint load).
    pub fn with_params(cfg: &ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::build(cfg, 0)?;
        for (name, t) in model.params.iter() {
            let loaded = params
                .try_get(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if loaded.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    got: loaded.shape().to_vec(),
                });
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn n_patches(&self) -> usize {
        let (gh, gw) = self.cfg.token_grid();
        gh * gw
    }

    /// Raw patch tokens of an image, cast to the model scalar type.
    pub fn image_patches(&self, image: &ImageRecord) -> Result<Vec<T>> {
        let grid = patchify(image, self.cfg.patch)?;
        Ok(grid.tokens.iter().map(|&v| T::from_f64(v as f64)).collect())
    }

    /// Regression target tokens for an image.
    pub fn image_targets(&self, image: &ImageRecord) -> Result<Vec<T>> {
        let grid = reconstruction_target(image, self.cfg.patch, self.cfg.patch_norm_target)?;
        Ok(grid.tokens.iter().map(|&v| T::from_f64(v as f64)).collect())
    }

    pub fn sample_plan(&self, seed: u64) -> Result<MaskPlan> {
        sample_mask(self.n_patches(), self.cfg.mask_ratio, seed)
    }

    /// Full reconstruction pass: embed, replace masked tokens with the mask
    /// token, encode, decode, project to pixel patches.
    pub fn forward_patches(&self, raw_patches: &[T], plan: &MaskPlan) -> (Vec<T>, MaeCache<T>) {
        let c0 = self.cfg.embed_dim;
        let mask_token = self.params.get(MASK_TOKEN).data().to_vec();
        let (enc_outs, enc_cache) = self.encoder.forward(&self.params, raw_patches, |tokens| {
            for &i in &plan.masked_indices {
                tokens[i * c0..(i + 1) * c0].copy_from_slice(&mask_token);
            }
        });

        let mut cur = enc_outs.last().expect("at least one stage").clone();
        let mut dec_caches = Vec::with_capacity(self.decoder.stages.len());
        for st in &self.decoder.stages {
            let (expanded, expand_in) = st.expand.forward(&self.params, &cur);
            cur = expanded;
            let mut blocks = Vec::with_capacity(st.blocks.len());
            for b in &st.blocks {
                let (next, bc) = b.forward(&self.params, &cur);
                blocks.push(bc);
                cur = next;
            }
            dec_caches.push(DecStageCache { expand_in, blocks });
        }
        let pred = self
            .decoder
            .head
            .forward(&self.params, &cur, self.n_patches());
        (
            pred,
            MaeCache {
                plan: plan.clone(),
                enc: enc_cache,
                dec: dec_caches,
                head_in: cur,
            },
        )
    }

    /// Backward from d(pred); returns gradients for every parameter touched,
    /// including the mask token.
    pub fn backward(&self, cache: &MaeCache<T>, d_pred: &[T]) -> GradStore<T> {
        self.backward_full(cache, d_pred).0
    }

    /// As [`Self::backward`], also returning d(raw patches). Masked patches
    /// carry exactly zero gradient: the mask token replaced them.
    pub fn backward_full(&self, cache: &MaeCache<T>, d_pred: &[T]) -> (GradStore<T>, Vec<T>) {
        let mut grads = GradStore::new();
        let n0 = self.n_patches();
        let c0 = self.cfg.embed_dim;

        let mut d_cur =
            self.decoder
                .head
                .backward(&self.params, &mut grads, &cache.head_in, d_pred, n0);
        for (st, sc) in self.decoder.stages.iter().zip(&cache.dec).rev() {
            for (b, bc) in st.blocks.iter().zip(&sc.blocks).rev() {
                d_cur = b.backward(&self.params, &mut grads, bc, &d_cur);
            }
            d_cur = st
                .expand
                .backward(&self.params, &mut grads, &sc.expand_in, &d_cur);
        }

        let mut d_stages: Vec<Vec<T>> = vec![Vec::new(); self.encoder.stages.len()];
        *d_stages.last_mut().expect("stages nonempty") = d_cur;
        let mut d_embedded = self
            .encoder
            .backward(&self.params, &mut grads, &cache.enc, d_stages);

        // Mask token: sum of gradients at replaced positions; the embedding
        // receives no gradient there.
        let mut d_mask = crate::tensor::Tensor::<T>::zeros(&[c0]);
        for &i in &cache.plan.masked_indices {
            let row = &mut d_embedded[i * c0..(i + 1) * c0];
            for (m, v) in d_mask.data_mut().iter_mut().zip(row.iter()) {
                *m = *m + *v;
            }
            row.fill(T::zero());
        }
        grads.accum(MASK_TOKEN, d_mask);
        let d_patches =
            self.encoder
                .backward_embed(&self.params, &mut grads, &cache.enc, &d_embedded);
        (grads, d_patches)
    }
}

/// Masked-MSE reconstruction loss. In masked-only mode the mean runs over
/// masked patch elements alone and unmasked predictions carry exactly zero
/// gradient.
pub fn mae_loss_backward<T: Scalar>(
    pred: &[T],
    target: &[T],
    token_dim: usize,
    plan: &MaskPlan,
    masked_only: bool,
) -> Result<(T, Vec<T>)> {
    if pred.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction ({}) and target ({}) lengths differ",
            pred.len(),
            target.len()
        )));
    }
    let mut d = vec![T::zero(); pred.len()];
    let two = T::from_f64(2.0);
    if masked_only {
        if plan.masked_indices.is_empty() {
            return Err(Error::InvalidArgument(
                "mask plan is empty; masked-only loss undefined".into(),
            ));
        }
        let denom = T::from_f64((plan.masked_indices.len() * token_dim) as f64);
        let mut loss = T::zero();
        for &i in &plan.masked_indices {
            for j in i * token_dim..(i + 1) * token_dim {
                let e = pred[j] - target[j];
                loss = loss + e * e;
                d[j] = two * e / denom;
            }
        }
        Ok((loss / denom, d))
    } else {
        let denom = T::from_f64(pred.len() as f64);
        let mut loss = T::zero();
        for j in 0..pred.len() {
            let e = pred[j] - target[j];
            loss = loss + e * e;
            d[j] = two * e / denom;
        }
        Ok((loss / denom, d))
    }
}

pub fn mae_loss<T: Scalar>(
    pred: &[T],
    target: &[T],
    token_dim: usize,
    plan: &MaskPlan,
    masked_only: bool,
) -> Result<T> {
    mae_loss_backward(pred, target, token_dim, plan, masked_only).map(|(l, _)| l)
}

/// Mask seed for the image at `position` of epoch `epoch`: independent of
/// batch boundaries and loader scheduling.
pub fn mask_seed_for(seed: u64, epoch: usize, position: usize) -> u64 {
    derive_seed(seed, "mask", &[epoch as u64, position as u64])
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

pub type TrainLog = Vec<EpochStat>;

#[derive(Clone, Copy, Debug)]
pub struct PretrainOpts {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

/// Self-supervised pretraining over in-memory records. Deterministic for a
/// fixed seed regardless of worker count: per-image gradients are reduced in
/// position order.
pub fn pretrain_run(
    records: &[ImageRecord],
    cfg: &ModelConfig,
    sched: &ScheduleConfig,
    opts: &PretrainOpts,
) -> Result<(MaeModel<f32>, TrainLog)> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to pretrain on".into()));
    }
    sched.validate()?;
    let model = MaeModel::<f32>::build(cfg, opts.seed)?;
    let patches: Vec<Vec<f32>> = records
        .iter()
        .map(|r| model.image_patches(r))
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<f32>> = records
        .iter()
        .map(|r| model.image_targets(r))
        .collect::<Result<_>>()?;

    let mut model = model;
    let mut state = OptState::new();
    let mut log = Vec::with_capacity(opts.epochs);
    let steps_per_epoch = records.len().div_ceil(opts.batch_size);
    let token_dim = cfg.patch_dim();

    for epoch in 0..opts.epochs {
        let mut order = permutation(
            &mut rng_from(opts.seed, "epoch-order", &[epoch as u64]),
            records.len(),
        );
        let mut epoch_loss = 0.0f64;
        for (step, batch) in order.chunks_mut(opts.batch_size).enumerate() {
            let lr = lr_at(sched, epoch as f64 + step as f64 / steps_per_epoch as f64)?;
            let per_image: Vec<Result<(f64, GradStore<f32>)>> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &rec_idx)| {
                    let position = step * opts.batch_size + slot;
                    let plan = model.sample_plan(mask_seed_for(opts.seed, epoch, position))?;
                    let (pred, cache) = model.forward_patches(&patches[rec_idx], &plan);
                    let (loss, d_pred) = mae_loss_backward(
                        &pred,
                        &targets[rec_idx],
                        token_dim,
                        &plan,
                        cfg.masked_loss_only,
                    )?;
                    if !loss.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "reconstruction loss for {:?} at epoch {epoch}",
                            records[rec_idx].id
                        )));
                    }
                    Ok((loss as f64, model.backward(&cache, &d_pred)))
                })
                .collect();

            let mut grads = GradStore::new();
            let mut batch_loss = 0.0f64;
            let batch_len = batch.len();
            for r in per_image {
                let (loss, g) = r?;
                batch_loss += loss;
                grads.merge(g);
            }
            grads.scale(1.0 / batch_len as f32);
            epoch_loss += batch_loss;
            adamw_step(&mut model.params, &grads, &mut state, sched, lr)?;
        }
        log.push(EpochStat {
            epoch,
            mean_loss: epoch_loss / records.len() as f64,
            lr: lr_at(sched, epoch as f64)?,
        });
    }
    Ok((model, log))
}
