//! Supervised finetuning loops and evaluation passes for the downstream
//! models. Gradients from a batch are always reduced in position order, so
//! results do not depend on the worker count.

use rayon::prelude::*;

use crate::adapt::{ClsModel, SegModel};
use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::optim::{
    adamw_step, ce_loss_backward, lr_at, seg_loss_backward, OptState, ScheduleConfig,
};
use crate::patches::patchify;
use crate::rng::{permutation, rng_from};
use crate::stats::dice_score;
use crate::store::GradStore;

#[derive(Clone, Copy, Debug)]
pub struct FinetuneOpts {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub w_dice: f64,
    pub w_ce: f64,
    /// Evaluate on the validation set every this many epochs and keep the
    /// best weights seen (0 disables selection; the final weights are kept).
    pub val_every: usize,
}

impl FinetuneOpts {
    pub fn new(batch_size: usize, epochs: usize, seed: u64) -> Self {
        FinetuneOpts {
            batch_size,
            epochs,
            seed,
            w_dice: 0.5,
            w_ce: 0.5,
            val_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    /// Validation metric: mean foreground Dice (segmentation) or accuracy
    /// (classification). NaN when no validation set was given.
    pub val_metric: f64,
}

fn patches_of(record: &ImageRecord, patch: usize) -> Result<Vec<f32>> {
    Ok(patchify(record, patch)?.tokens)
}

fn mask_targets(record: &ImageRecord, n_classes: usize) -> Result<Vec<usize>> {
    let mask = record.seg_mask.as_ref().ok_or_else(|| {
        Error::InvalidArgument(format!("record {:?} has no segmentation mask", record.id))
    })?;
    let targets: Vec<usize> = mask.iter().map(|&v| v as usize).collect();
    if let Some(&bad) = targets.iter().find(|&&t| t >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "mask label {bad} out of range for {n_classes} classes in {:?}",
            record.id
        )));
    }
    Ok(targets)
}

/// Argmax segmentation of one record.
pub fn predict_mask(model: &SegModel<f32>, record: &ImageRecord) -> Result<Vec<u32>> {
    let patches = patches_of(record, model.cfg.patch)?;
    let (logits, _) = model.forward(&patches);
    let k = model.n_classes;
    Ok(logits
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for i in 1..k {
                if row[i] > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect())
}

/// Per-case mean foreground Dice over records.
pub fn eval_seg(model: &SegModel<f32>, records: &[ImageRecord]) -> Result<Vec<(String, f64)>> {
    records
        .par_iter()
        .map(|r| {
            let pred = predict_mask(model, r)?;
            let gt = r.seg_mask.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("record {:?} has no segmentation mask", r.id))
            })?;
            let (_, mean) = dice_score(&pred, gt, model.n_classes, false)?;
            Ok((r.id.clone(), mean))
        })
        .collect()
}

/// Softmax class scores per record: (id, label, scores).
pub fn eval_cls(
    model: &ClsModel<f32>,
    records: &[ImageRecord],
) -> Result<Vec<(String, usize, Vec<f64>)>> {
    records
        .par_iter()
        .map(|r| {
            let label = r.class_label.ok_or_else(|| {
                Error::InvalidArgument(format!("record {:?} has no class label", r.id))
            })?;
            let patches = patches_of(r, model.cfg.patch)?;
            let (logits, _) = model.forward(&patches);
            let mut probs: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
            let mx = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for p in probs.iter_mut() {
                *p = (*p - mx).exp();
                sum += *p;
            }
            for p in probs.iter_mut() {
                *p /= sum;
            }
            Ok((r.id.clone(), label, probs))
        })
        .collect()
}

/// Dice + cross-entropy finetuning of the segmenter.
pub fn finetune_seg(
    model: &mut SegModel<f32>,
    train: &[ImageRecord],
    val: &[ImageRecord],
    sched: &ScheduleConfig,
    opts: &FinetuneOpts,
) -> Result<Vec<FinetuneEpoch>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training records".into()));
    }
    sched.validate()?;
    let patch = model.cfg.patch;
    let k = model.n_classes;
    let patches: Vec<Vec<f32>> = train
        .iter()
        .map(|r| patches_of(r, patch))
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<usize>> = train
        .iter()
        .map(|r| mask_targets(r, k))
        .collect::<Result<_>>()?;

    let mut state = OptState::new();
    let mut log = Vec::with_capacity(opts.epochs);
    let mut best: Option<(f64, crate::store::ParamStore<f32>)> = None;
    let steps_per_epoch = train.len().div_ceil(opts.batch_size);
    for epoch in 0..opts.epochs {
        let order = permutation(
            &mut rng_from(opts.seed, "seg-epoch", &[epoch as u64]),
            train.len(),
        );
        let mut epoch_loss = 0.0f64;
        for (step, batch) in order.chunks(opts.batch_size).enumerate() {
            let lr = lr_at(sched, epoch as f64 + step as f64 / steps_per_epoch as f64)?;
            let per_image: Vec<Result<(f64, GradStore<f32>)>> = batch
                .par_iter()
                .map(|&idx| {
                    let (logits, cache) = model.forward(&patches[idx]);
                    let (loss, d_logits) =
                        seg_loss_backward(&logits, k, &targets[idx], opts.w_dice, opts.w_ce)?;
                    if !loss.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "segmentation loss for {:?} at epoch {epoch}",
                            train[idx].id
                        )));
                    }
                    Ok((loss as f64, model.backward(&cache, &d_logits)))
                })
                .collect();
            let mut grads = GradStore::new();
            let mut batch_loss = 0.0;
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
        let val_due = !val.is_empty()
            && opts.val_every > 0
            && (epoch % opts.val_every == 0 || epoch + 1 == opts.epochs);
        let val_metric = if val_due {
            let scores = eval_seg(model, val)?;
            let m = scores.iter().map(|(_, d)| d).sum::<f64>() / scores.len() as f64;
            if best.as_ref().is_none_or(|(b, _)| m > *b) {
                best = Some((m, model.params.clone()));
            }
            m
        } else {
            f64::NAN
        };
        log.push(FinetuneEpoch {
            epoch,
            mean_loss: epoch_loss / train.len() as f64,
            lr: lr_at(sched, epoch as f64)?,
            val_metric,
        });
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(log)
}

/// Cross-entropy finetuning of the classifier.
pub fn finetune_cls(
    model: &mut ClsModel<f32>,
    train: &[ImageRecord],
    val: &[ImageRecord],
    sched: &ScheduleConfig,
    opts: &FinetuneOpts,
) -> Result<Vec<FinetuneEpoch>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training records".into()));
    }
    sched.validate()?;
    let patch = model.cfg.patch;
    let k = model.n_classes;
    let patches: Vec<Vec<f32>> = train
        .iter()
        .map(|r| patches_of(r, patch))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = train
        .iter()
        .map(|r| {
            r.class_label.ok_or_else(|| {
                Error::InvalidArgument(format!("record {:?} has no class label", r.id))
            })
        })
        .collect::<Result<_>>()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "class label {bad} out of range for {k} classes"
        )));
    }

    let mut state = OptState::new();
    let mut log = Vec::with_capacity(opts.epochs);
    let mut best: Option<(f64, crate::store::ParamStore<f32>)> = None;
    let steps_per_epoch = train.len().div_ceil(opts.batch_size);
    for epoch in 0..opts.epochs {
        let order = permutation(
            &mut rng_from(opts.seed, "cls-epoch", &[epoch as u64]),
            train.len(),
        );
        let mut epoch_loss = 0.0f64;
        for (step, batch) in order.chunks(opts.batch_size).enumerate() {
            let lr = lr_at(sched, epoch as f64 + step as f64 / steps_per_epoch as f64)?;
            let per_image: Vec<Result<(f64, GradStore<f32>)>> = batch
                .par_iter()
                .map(|&idx| {
                    let (logits, cache) = model.forward(&patches[idx]);
                    let (loss, d_logits) = ce_loss_backward(&logits, k, &labels[idx..=idx])?;
                    if !loss.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "classification loss for {:?} at epoch {epoch}",
                            train[idx].id
                        )));
                    }
                    Ok((loss as f64, model.backward(&cache, &d_logits)))
                })
                .collect();
            let mut grads = GradStore::new();
            let mut batch_loss = 0.0;
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
        let val_due = !val.is_empty()
            && opts.val_every > 0
            && (epoch % opts.val_every == 0 || epoch + 1 == opts.epochs);
        let val_metric = if val_due {
            let preds = eval_cls(model, val)?;
            let correct = preds
                .iter()
                .filter(|(_, label, scores)| {
                    let mut top = 0;
                    for i in 1..scores.len() {
                        if scores[i] > scores[top] {
                            top = i;
                        }
                    }
                    top == *label
                })
                .count();
            let m = correct as f64 / preds.len() as f64;
            if best.as_ref().is_none_or(|(b, _)| m > *b) {
                best = Some((m, model.params.clone()));
            }
            m
        } else {
            f64::NAN
        };
        log.push(FinetuneEpoch {
            epoch,
            mean_loss: epoch_loss / train.len() as f64,
            lr: lr_at(sched, epoch as f64)?,
            val_metric,
        });
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{ingest_image, synth_corpus, SynthSpec};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            image_size: (32, 32),
            in_channels: 1,
            patch: 4,
            embed_dim: 8,
            enc_depths: vec![2, 2, 2],
            enc_heads: vec![2, 2, 4],
            dec_depths: vec![2, 2],
            window: 4,
            mlp_ratio: 2.0,
            mask_ratio: 0.75,
            patch_norm_target: false,
            masked_loss_only: true,
            use_rel_bias: true,
        }
    }

    fn synth_records(n: usize, seed: u64) -> Vec<ImageRecord> {
        let dir =
            std::env::temp_dir().join(format!("swinmae-train-test-{}-{seed}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let spec = SynthSpec {
            n,
            size: (32, 32),
            class_count: 2,
            noise: 0.3,
            seed,
        };
        let manifest = synth_corpus(&spec, &dir).unwrap();
        let records: Vec<ImageRecord> = manifest
            .entries
            .iter()
            .map(|e| ingest_image(&manifest, e, (32, 32)).unwrap())
            .collect();
        std::fs::remove_dir_all(&dir).unwrap();
        records
    }

    #[test]
    fn seg_finetune_learns_the_toy_shapes() {
        let records = synth_records(12, 3);
        let mut model = SegModel::<f32>::build(&small_cfg(), 3, 1).unwrap();
        let sched = ScheduleConfig::new(1e-3, 2, 12);
        let opts = FinetuneOpts {
            batch_size: 4,
            epochs: 12,
            seed: 5,
            w_dice: 0.5,
            w_ce: 0.5,
            val_every: 1,
        };
        let log = finetune_seg(&mut model, &records[..10], &records[10..], &sched, &opts).unwrap();
        assert_eq!(log.len(), 12);
        assert!(log.last().unwrap().mean_loss < log.first().unwrap().mean_loss);
        // Trainable at all: dice on train images clearly above chance.
        let dices = eval_seg(&model, &records[..10]).unwrap();
        let mean = dices.iter().map(|(_, d)| d).sum::<f64>() / dices.len() as f64;
        assert!(mean > 0.3, "train dice {mean}");
    }

    #[test]
    fn cls_finetune_reduces_loss() {
        let records = synth_records(12, 7);
        // Labels 1..=2 with background class 0 unused: 3 logits.
        let mut model = ClsModel::<f32>::build(&small_cfg(), 3, 2).unwrap();
        let sched = ScheduleConfig::new(1e-3, 2, 10);
        let opts = FinetuneOpts {
            batch_size: 4,
            epochs: 10,
            seed: 9,
            w_dice: 0.0,
            w_ce: 1.0,
            val_every: 1,
        };
        let log = finetune_cls(&mut model, &records[..10], &records[10..], &sched, &opts).unwrap();
        assert!(log.last().unwrap().mean_loss < log.first().unwrap().mean_loss);
    }

    #[test]
    fn missing_mask_is_an_error() {
        let mut records = synth_records(10, 11);
        for r in records.iter_mut() {
            r.seg_mask = None;
        }
        let mut model = SegModel::<f32>::build(&small_cfg(), 3, 1).unwrap();
        let sched = ScheduleConfig::new(1e-3, 1, 5);
        let opts = FinetuneOpts {
            batch_size: 4,
            epochs: 1,
            seed: 5,
            w_dice: 0.5,
            w_ce: 0.5,
            val_every: 1,
        };
        assert!(finetune_seg(&mut model, &records, &[], &sched, &opts).is_err());
    }
}

#[cfg(test)]
mod crossval_tests {
    use super::*;
    use crate::adapt::SegModel;
    use crate::config::ModelConfig;
    use crate::data::{ingest_image, make_splits, synth_corpus, SynthSpec};
    use crate::stats::{crossval_run, MetricKind};

    #[test]
    fn crossval_with_a_real_trainer_pools_dice_with_ci() {
        let dir = std::env::temp_dir().join(format!("swinmae-cv-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let spec = SynthSpec {
            n: 15,
            size: (32, 32),
            class_count: 2,
            noise: 0.3,
            seed: 77,
        };
        let manifest = synth_corpus(&spec, &dir).unwrap();
        let records: std::collections::BTreeMap<String, ImageRecord> = manifest
            .entries
            .iter()
            .map(|e| {
                let r = ingest_image(&manifest, e, (32, 32)).unwrap();
                (r.id.clone(), r)
            })
            .collect();
        std::fs::remove_dir_all(&dir).unwrap();
        let split = make_splits(&manifest, 77).unwrap();
        let cfg = ModelConfig {
            image_size: (32, 32),
            in_channels: 1,
            patch: 4,
            embed_dim: 8,
            enc_depths: vec![1, 1],
            enc_heads: vec![2, 2],
            dec_depths: vec![1],
            window: 4,
            mlp_ratio: 2.0,
            mask_ratio: 0.75,
            patch_norm_target: false,
            masked_loss_only: true,
            use_rel_bias: true,
        };
        let sched = ScheduleConfig::new(1e-3, 1, 2);
        let summary = crossval_run(&split, MetricKind::Dice, 1000, 9, |fold_idx, fold| {
            let mut model = SegModel::<f32>::build(&cfg, 3, fold_idx as u64).unwrap();
            let train: Vec<ImageRecord> = fold.train.iter().map(|id| records[id].clone()).collect();
            let test: Vec<ImageRecord> = fold.test.iter().map(|id| records[id].clone()).collect();
            let opts = FinetuneOpts {
                batch_size: 8,
                epochs: 2,
                seed: fold_idx as u64,
                w_dice: 0.5,
                w_ce: 0.5,
                val_every: 1,
            };
            finetune_seg(&mut model, &train, &[], &sched, &opts)?;
            eval_seg(&model, &test)
        })
        .unwrap();
        assert_eq!(summary.folds.len(), 5);
        assert_eq!(summary.pooled.n_resamples, 1000);
        assert!(summary.pooled.ci_low <= summary.pooled.point);
        assert!(summary.pooled.point <= summary.pooled.ci_high);
        let cases: usize = summary.folds.iter().map(|f| f.per_case.len()).sum();
        assert_eq!(cases, 15);
    }
}
