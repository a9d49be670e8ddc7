//! Command implementations behind the CLI surface.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::adapt::{
    check_transfer_compat, transfer_weights, verify_transfer, ClsModel, SegModel, TransferEntry,
    TransferPolicy, TransferStatus,
};
use crate::ckpt::{CkptMeta, NamedTensorStore};
use crate::data::{
    ingest_image, load_manifest, make_splits, subset_fraction, synth_corpus, DatasetManifest, Fold,
    ImageRecord, Modality, SynthSpec,
};
use crate::error::{Error, Result};
use crate::mae::{pretrain_run, PretrainOpts};
use crate::rng::derive_seed;
use crate::stats::{
    auroc_macro, bootstrap_ci, delong_test, metric_report, paired_ttest, significance_stars,
    MetricKind, DEFAULT_RESAMPLES,
};
use crate::store::ParamStore;
use crate::train::{eval_cls, eval_seg, finetune_cls, finetune_seg, FinetuneOpts};

use super::artifacts::{
    read_csv, write_cls_results, write_eval_results, write_finetune_log, write_pretrain_log,
    write_seg_results, write_sweep_results, write_transfer_report, ArtifactGuard, EvalRow,
};
use super::runconfig::EffectiveConfig;

fn ingest_all(
    manifest: &DatasetManifest,
    target: (usize, usize),
) -> Result<BTreeMap<String, ImageRecord>> {
    let records: Result<Vec<ImageRecord>> = manifest
        .entries
        .par_iter()
        .map(|e| ingest_image(manifest, e, target))
        .collect();
    Ok(records?.into_iter().map(|r| (r.id.clone(), r)).collect())
}

fn pick(map: &BTreeMap<String, ImageRecord>, ids: &[String]) -> Result<Vec<ImageRecord>> {
    ids.iter()
        .map(|id| {
            map.get(id)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("id {id:?} not in manifest")))
        })
        .collect()
}

pub fn cmd_synth(
    cfg: &EffectiveConfig,
    out_dir: &Path,
    n: usize,
    size: (usize, usize),
    classes: usize,
    noise: f64,
) -> Result<()> {
    let existed = out_dir.exists();
    let spec = SynthSpec {
        n,
        size,
        class_count: classes,
        noise,
        seed: cfg.seed,
    };
    match synth_corpus(&spec, out_dir) {
        Ok(manifest) => {
            println!(
                "wrote {} images to {} (manifest: {})",
                manifest.entries.len(),
                out_dir.display(),
                out_dir.join("manifest.jsonl").display()
            );
            Ok(())
        }
        Err(e) => {
            if !existed {
                let _ = std::fs::remove_dir_all(out_dir);
            }
            Err(e)
        }
    }
}

pub fn cmd_pretrain(
    cfg: &EffectiveConfig,
    manifest_path: &Path,
    out_dir: &Path,
    modality: Option<Modality>,
) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let manifest = match modality {
        Some(m) => manifest.filter_modality(m),
        None => manifest,
    };
    if manifest.entries.is_empty() {
        return Err(Error::InvalidArgument(
            "no entries after the modality filter".into(),
        ));
    }
    let records_map = ingest_all(&manifest, cfg.model.image_size)?;
    let records: Vec<ImageRecord> = records_map.into_values().collect();

    let opts = PretrainOpts {
        batch_size: cfg.pretrain.batch_size,
        epochs: cfg.pretrain.sched.total_epochs,
        seed: cfg.seed,
    };
    let (model, log) = pretrain_run(&records, &cfg.model, &cfg.pretrain.sched, &opts)?;

    let tag = modality.map(|m| m.as_str().to_string());
    let suffix = tag.clone().map(|t| format!("_{t}")).unwrap_or_default();
    let ckpt_path = out_dir.join(format!("pretrain{suffix}.ckpt"));
    let log_path = out_dir.join(format!("pretrain{suffix}_loss.csv"));

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut guard = ArtifactGuard::new();
    guard.track(&ckpt_path);
    guard.track(&log_path);

    let store = NamedTensorStore::from_params(
        CkptMeta {
            kind: "mae".into(),
            config: cfg.model.clone(),
            modality: tag,
            epoch: opts.epochs,
            seed: cfg.seed,
            note: String::new(),
        },
        &model.params,
    );
    store.save(&ckpt_path)?;
    write_pretrain_log(&log_path, &cfg.echo(), cfg.seed, &log)?;
    guard.disarm();
    println!("wrote {} and {}", ckpt_path.display(), log_path.display());
    Ok(())
}

/// Select one fold or all of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldSel {
    One(usize),
    All,
}

impl FoldSel {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(FoldSel::All);
        }
        s.parse::<usize>().map(FoldSel::One).map_err(|_| {
            Error::InvalidArgument(format!("fold must be an index or \"all\", got {s:?}"))
        })
    }
}

pub struct SegRunOutcome {
    pub model: SegModel<f32>,
    pub log: Vec<crate::train::FinetuneEpoch>,
    pub per_case: Vec<(String, f64)>,
    pub report_entries: Vec<TransferEntry>,
    pub note: String,
}

/// Build a segmenter per policy, finetune on one fold, evaluate its test set.
#[allow(clippy::too_many_arguments)]
pub fn run_seg_fold(
    cfg: &EffectiveConfig,
    ckpt: Option<&NamedTensorStore>,
    policy: Option<TransferPolicy>,
    n_classes: usize,
    records: &BTreeMap<String, ImageRecord>,
    fold: &Fold,
    transfer_seed: u64,
    train_seed: u64,
) -> Result<SegRunOutcome> {
    let mut model = SegModel::<f32>::build(&cfg.model, n_classes, transfer_seed)?;
    let specs = model.specs();
    let (report_entries, note) = match (ckpt, policy) {
        (Some(store), Some(pol)) => {
            check_transfer_compat(&store.meta.config, &model.cfg)?;
            let report = transfer_weights(store, &mut model.params, &specs, pol, transfer_seed)?;
            let failures = verify_transfer(store, &model.params, &report);
            if let Some(first) = failures.first() {
                return Err(Error::Checkpoint(format!(
                    "transfer verification failed at tensor {first:?}"
                )));
            }
            (report.entries, report.note)
        }
        (None, None) => {
            let entries = {
                let mut sorted: Vec<_> = specs.iter().collect();
                sorted.sort_by(|a, b| a.name.cmp(&b.name));
                sorted
                    .into_iter()
                    .map(|s| TransferEntry {
                        tensor: s.name.clone(),
                        status: TransferStatus::RandomInit,
                        source: None,
                        shape: s.shape.clone(),
                    })
                    .collect()
            };
            (
                entries,
                "scratch initialization; no tensors transferred".into(),
            )
        }
        (Some(_), None) => {
            return Err(Error::InvalidArgument(
                "checkpoint given but policy is scratch".into(),
            ))
        }
        (None, Some(_)) => {
            return Err(Error::InvalidArgument(
                "transfer policy requires --ckpt".into(),
            ))
        }
    };

    let train = pick(records, &fold.train)?;
    let val = pick(records, &fold.val)?;
    let test = pick(records, &fold.test)?;
    let opts = FinetuneOpts {
        batch_size: cfg.seg.batch_size,
        epochs: cfg.seg.sched.total_epochs,
        seed: train_seed,
        w_dice: cfg.w_dice,
        w_ce: cfg.w_ce,
        val_every: 1,
    };
    let log = finetune_seg(&mut model, &train, &val, &cfg.seg.sched, &opts)?;
    let per_case = eval_seg(&model, &test)?;
    Ok(SegRunOutcome {
        model,
        log,
        per_case,
        report_entries,
        note,
    })
}

fn policy_label(policy: Option<TransferPolicy>) -> &'static str {
    policy.map(|p| p.as_str()).unwrap_or("SCRATCH")
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_finetune_seg(
    cfg: &EffectiveConfig,
    manifest_path: &Path,
    ckpt_path: Option<&Path>,
    policy: Option<TransferPolicy>,
    fraction: f64,
    fold_sel: FoldSel,
    out_dir: &Path,
) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let n_classes = manifest.class_count;
    if n_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "manifest declares {n_classes} classes; segmentation needs at least 2"
        )));
    }
    let split = make_splits(&manifest, cfg.seed)?;
    let split = subset_fraction(&split, fraction, cfg.seed)?;
    let records = ingest_all(&manifest, cfg.model.image_size)?;
    let ckpt = match ckpt_path {
        Some(p) => Some(NamedTensorStore::load(p)?),
        None => None,
    };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut guard = ArtifactGuard::new();
    let echo = cfg.echo();

    match fold_sel {
        FoldSel::One(f) => {
            let fold = split.folds.get(f).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "fold {f} out of range ({} folds)",
                    split.folds.len()
                ))
            })?;
            let outcome = run_seg_fold(
                cfg,
                ckpt.as_ref(),
                policy,
                n_classes,
                &records,
                fold,
                derive_seed(cfg.seed, "seg-init", &[f as u64]),
                derive_seed(cfg.seed, "seg-train", &[f as u64]),
            )?;

            let ckpt_out = out_dir.join("seg.ckpt");
            let report_out = out_dir.join("seg_transfer.csv");
            let loss_out = out_dir.join("seg_loss.csv");
            let results_out = out_dir.join("seg_results.csv");
            for p in [&ckpt_out, &report_out, &loss_out, &results_out] {
                guard.track(p);
            }
            NamedTensorStore::from_params(
                CkptMeta {
                    kind: "seg".into(),
                    config: outcome.model.cfg.clone(),
                    modality: None,
                    epoch: cfg.seg.sched.total_epochs,
                    seed: cfg.seed,
                    note: outcome.note.clone(),
                },
                &outcome.model.params,
            )
            .save(&ckpt_out)?;
            write_transfer_report(
                &report_out,
                &echo,
                cfg.seed,
                policy_label(policy),
                &outcome.note,
                &outcome.report_entries,
            )?;
            write_finetune_log(&loss_out, &echo, cfg.seed, &outcome.log)?;
            let rows: Vec<(usize, String, f64)> = outcome
                .per_case
                .iter()
                .map(|(id, d)| (f, id.clone(), *d))
                .collect();
            write_seg_results(&results_out, &echo, cfg.seed, &rows)?;
            guard.disarm();
            println!(
                "fold {f}: mean test dice {:.4} over {} cases; wrote {}",
                rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64,
                rows.len(),
                results_out.display()
            );
        }
        FoldSel::All => {
            let mut all_rows: Vec<(usize, String, f64)> = Vec::new();
            let mut report0: Option<(Vec<TransferEntry>, String)> = None;
            let mut logs: Vec<(usize, Vec<crate::train::FinetuneEpoch>)> = Vec::new();
            let summary = crate::stats::crossval_run(
                &split,
                MetricKind::Dice,
                DEFAULT_RESAMPLES,
                cfg.seed,
                |fold_idx, fold| {
                    let outcome = run_seg_fold(
                        cfg,
                        ckpt.as_ref(),
                        policy,
                        n_classes,
                        &records,
                        fold,
                        derive_seed(cfg.seed, "seg-init", &[fold_idx as u64]),
                        derive_seed(cfg.seed, "seg-train", &[fold_idx as u64]),
                    )?;
                    if report0.is_none() {
                        report0 = Some((outcome.report_entries.clone(), outcome.note.clone()));
                    }
                    logs.push((fold_idx, outcome.log.clone()));
                    all_rows.extend(
                        outcome
                            .per_case
                            .iter()
                            .map(|(id, d)| (fold_idx, id.clone(), *d)),
                    );
                    Ok(outcome.per_case)
                },
            )?;

            let results_out = out_dir.join("seg_results.csv");
            let summary_out = out_dir.join("seg_cv_summary.csv");
            let report_out = out_dir.join("seg_transfer.csv");
            for p in [&results_out, &summary_out, &report_out] {
                guard.track(p);
            }
            write_seg_results(&results_out, &echo, cfg.seed, &all_rows)?;
            let mut rows: Vec<EvalRow> = summary
                .folds
                .iter()
                .map(|f| EvalRow {
                    task: "seg".into(),
                    model: policy_label(policy).to_lowercase(),
                    fold: f.fold.to_string(),
                    metric: "DICE".into(),
                    point: f.report.point,
                    ci_low: f.report.ci_low,
                    ci_high: f.report.ci_high,
                    p_vs_reference: None,
                    stars: String::new(),
                })
                .collect();
            rows.push(EvalRow {
                task: "seg".into(),
                model: policy_label(policy).to_lowercase(),
                fold: "pooled".into(),
                metric: "DICE".into(),
                point: summary.pooled.point,
                ci_low: summary.pooled.ci_low,
                ci_high: summary.pooled.ci_high,
                p_vs_reference: None,
                stars: String::new(),
            });
            write_eval_results(&summary_out, &echo, cfg.seed, &rows)?;
            let (entries, note) = report0.expect("at least one fold ran");
            write_transfer_report(
                &report_out,
                &echo,
                cfg.seed,
                policy_label(policy),
                &note,
                &entries,
            )?;
            for (fold_idx, log) in &logs {
                let p = out_dir.join(format!("seg_fold{fold_idx}_loss.csv"));
                guard.track(&p);
                write_finetune_log(&p, &echo, cfg.seed, log)?;
            }
            guard.disarm();
            println!(
                "cross-validation pooled dice {:.4} ({:.4}, {:.4}); wrote {}",
                summary.pooled.point,
                summary.pooled.ci_low,
                summary.pooled.ci_high,
                summary_out.display()
            );
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_finetune_cls(
    cfg: &EffectiveConfig,
    manifest_path: &Path,
    ckpt_path: Option<&Path>,
    policy: Option<TransferPolicy>,
    fraction: f64,
    fold_sel: FoldSel,
    out_dir: &Path,
) -> Result<()> {
    if let Some(pol) = policy {
        if pol != TransferPolicy::Classify {
            return Err(Error::InvalidArgument(format!(
                "classification finetuning accepts only the classify policy, got {}",
                pol.as_str()
            )));
        }
    }
    let manifest = load_manifest(manifest_path)?;
    let n_classes = manifest.class_count;
    if n_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "manifest declares {n_classes} classes; classification needs at least 2"
        )));
    }
    let split = make_splits(&manifest, cfg.seed)?;
    let split = subset_fraction(&split, fraction, cfg.seed)?;
    let records = ingest_all(&manifest, cfg.model.image_size)?;
    let ckpt = match ckpt_path {
        Some(p) => Some(NamedTensorStore::load(p)?),
        None => None,
    };

    let fold_idx = match fold_sel {
        FoldSel::One(f) => f,
        FoldSel::All => {
            return Err(Error::InvalidArgument(
                "cross-validation over all folds is available for segmentation only".into(),
            ))
        }
    };
    let fold = split.folds.get(fold_idx).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "fold {fold_idx} out of range ({} folds)",
            split.folds.len()
        ))
    })?;

    let init_seed = derive_seed(cfg.seed, "cls-init", &[fold_idx as u64]);
    let mut model = ClsModel::<f32>::build(&cfg.model, n_classes, init_seed)?;
    let specs = model.specs();
    let (entries, note) = match (&ckpt, policy) {
        (Some(store), Some(pol)) => {
            check_transfer_compat(&store.meta.config, &model.cfg)?;
            let report = transfer_weights(store, &mut model.params, &specs, pol, init_seed)?;
            let failures = verify_transfer(store, &model.params, &report);
            if let Some(first) = failures.first() {
                return Err(Error::Checkpoint(format!(
                    "transfer verification failed at tensor {first:?}"
                )));
            }
            (report.entries, report.note)
        }
        (None, None) => {
            let mut sorted: Vec<_> = specs.iter().collect();
            sorted.sort_by(|a, b| a.name.cmp(&b.name));
            (
                sorted
                    .into_iter()
                    .map(|s| TransferEntry {
                        tensor: s.name.clone(),
                        status: TransferStatus::RandomInit,
                        source: None,
                        shape: s.shape.clone(),
                    })
                    .collect(),
                "scratch initialization; no tensors transferred".to_string(),
            )
        }
        (Some(_), None) => {
            return Err(Error::InvalidArgument(
                "checkpoint given but policy is scratch".into(),
            ))
        }
        (None, Some(_)) => {
            return Err(Error::InvalidArgument(
                "transfer policy requires --ckpt".into(),
            ))
        }
    };

    let train = pick(&records, &fold.train)?;
    let val = pick(&records, &fold.val)?;
    let test = pick(&records, &fold.test)?;
    let opts = FinetuneOpts {
        batch_size: cfg.cls.batch_size,
        epochs: cfg.cls.sched.total_epochs,
        seed: derive_seed(cfg.seed, "cls-train", &[fold_idx as u64]),
        w_dice: 0.0,
        w_ce: 1.0,
        val_every: 1,
    };
    let log = finetune_cls(&mut model, &train, &val, &cfg.cls.sched, &opts)?;
    let per_case = eval_cls(&model, &test)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut guard = ArtifactGuard::new();
    let echo = cfg.echo();
    let ckpt_out = out_dir.join("cls.ckpt");
    let report_out = out_dir.join("cls_transfer.csv");
    let loss_out = out_dir.join("cls_loss.csv");
    let results_out = out_dir.join("cls_results.csv");
    for p in [&ckpt_out, &report_out, &loss_out, &results_out] {
        guard.track(p);
    }
    NamedTensorStore::from_params(
        CkptMeta {
            kind: "cls".into(),
            config: model.cfg.clone(),
            modality: None,
            epoch: cfg.cls.sched.total_epochs,
            seed: cfg.seed,
            note: note.clone(),
        },
        &model.params,
    )
    .save(&ckpt_out)?;
    write_transfer_report(
        &report_out,
        &echo,
        cfg.seed,
        policy_label(policy),
        &note,
        &entries,
    )?;
    write_finetune_log(&loss_out, &echo, cfg.seed, &log)?;
    let rows: Vec<(usize, String, usize, Vec<f64>)> = per_case
        .iter()
        .map(|(id, label, scores)| (fold_idx, id.clone(), *label, scores.clone()))
        .collect();
    write_cls_results(&results_out, &echo, cfg.seed, n_classes, &rows)?;
    guard.disarm();
    println!(
        "fold {fold_idx}: wrote {} test predictions to {}",
        rows.len(),
        results_out.display()
    );
    Ok(())
}

fn model_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Paired per-case Dice comparison of two segmentation result files.
fn evaluate_seg(a: &Path, b: &Path, seed: u64) -> Result<Vec<EvalRow>> {
    let parse = |path: &Path| -> Result<BTreeMap<String, f64>> {
        let (_, header, rows) = read_csv(path)?;
        if header != ["fold", "id", "dice"] {
            return Err(Error::InvalidArgument(format!(
                "{} is not a segmentation results file",
                path.display()
            )));
        }
        rows.into_iter()
            .map(|r| {
                let dice: f64 = r[2]
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad dice value {:?}", r[2])))?;
                Ok((r[1].clone(), dice))
            })
            .collect()
    };
    let va = parse(a)?;
    let vb = parse(b)?;
    if va.keys().ne(vb.keys()) {
        return Err(Error::InvalidArgument(
            "result files cover different case ids; a paired test needs identical cases".into(),
        ));
    }
    let ids: Vec<&String> = va.keys().collect();
    let xs: Vec<f64> = ids.iter().map(|id| va[*id]).collect();
    let ys: Vec<f64> = ids.iter().map(|id| vb[*id]).collect();

    let ra = metric_report(
        MetricKind::Dice,
        &xs,
        DEFAULT_RESAMPLES,
        derive_seed(seed, "eval", &[0]),
    )?;
    let rb = metric_report(
        MetricKind::Dice,
        &ys,
        DEFAULT_RESAMPLES,
        derive_seed(seed, "eval", &[1]),
    )?;
    let t = paired_ttest(&ys, &xs)?;
    Ok(vec![
        EvalRow {
            task: "seg".into(),
            model: model_name(a),
            fold: "all".into(),
            metric: "DICE".into(),
            point: ra.point,
            ci_low: ra.ci_low,
            ci_high: ra.ci_high,
            p_vs_reference: None,
            stars: String::new(),
        },
        EvalRow {
            task: "seg".into(),
            model: model_name(b),
            fold: "all".into(),
            metric: "DICE".into(),
            point: rb.point,
            ci_low: rb.ci_low,
            ci_high: rb.ci_high,
            p_vs_reference: Some(t.p_value),
            stars: t.stars,
        },
    ])
}

struct ClsFile {
    labels: Vec<usize>,
    scores: Vec<Vec<f64>>,
}

fn parse_cls(path: &Path) -> Result<(Vec<String>, ClsFile)> {
    let (_, header, rows) = read_csv(path)?;
    if header.len() < 4 || header[..3] != ["fold", "id", "label"] {
        return Err(Error::InvalidArgument(format!(
            "{} is not a classification results file",
            path.display()
        )));
    }
    let mut ids = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    let mut scores = Vec::with_capacity(rows.len());
    for r in rows {
        ids.push(r[1].clone());
        labels.push(r[2].parse::<usize>().map_err(|_| {
            Error::InvalidArgument(format!("bad label {:?} in {}", r[2], path.display()))
        })?);
        scores.push(
            r[3..]
                .iter()
                .map(|v| {
                    v.parse::<f64>().map_err(|_| {
                        Error::InvalidArgument(format!("bad score {v:?} in {}", path.display()))
                    })
                })
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    Ok((ids, ClsFile { labels, scores }))
}

/// AUROC comparison of two classification result files: DeLong on binary
/// tasks, macro AUROC with a bootstrap difference test otherwise.
fn evaluate_cls(a: &Path, b: &Path, seed: u64) -> Result<Vec<EvalRow>> {
    let (ids_a, fa) = parse_cls(a)?;
    let (ids_b, fb) = parse_cls(b)?;
    let mut order: Vec<usize> = (0..ids_a.len()).collect();
    order.sort_by(|&i, &j| ids_a[i].cmp(&ids_a[j]));
    let mut order_b: Vec<usize> = (0..ids_b.len()).collect();
    order_b.sort_by(|&i, &j| ids_b[i].cmp(&ids_b[j]));
    let sorted_a: Vec<&String> = order.iter().map(|&i| &ids_a[i]).collect();
    let sorted_b: Vec<&String> = order_b.iter().map(|&i| &ids_b[i]).collect();
    if sorted_a != sorted_b {
        return Err(Error::InvalidArgument(
            "result files cover different case ids; a paired test needs identical cases".into(),
        ));
    }
    if order
        .iter()
        .zip(&order_b)
        .any(|(&i, &j)| fa.labels[i] != fb.labels[j])
    {
        return Err(Error::InvalidArgument(
            "case labels disagree between the two result files".into(),
        ));
    }

    let labels: Vec<usize> = order.iter().map(|&i| fa.labels[i]).collect();
    let scores_a: Vec<Vec<f64>> = order.iter().map(|&i| fa.scores[i].clone()).collect();
    let scores_b: Vec<Vec<f64>> = order_b.iter().map(|&j| fb.scores[j].clone()).collect();

    let mut observed: Vec<usize> = labels.clone();
    observed.sort_unstable();
    observed.dedup();

    if observed.len() == 2 {
        // Binary: DeLong gives both CIs and the significance test.
        let pos = observed[1];
        let bin: Vec<u8> = labels.iter().map(|&l| u8::from(l == pos)).collect();
        let sa: Vec<f64> = scores_a.iter().map(|r| r[pos]).collect();
        let sb: Vec<f64> = scores_b.iter().map(|r| r[pos]).collect();
        let d = delong_test(&sa, &sb, &bin)?;
        Ok(vec![
            EvalRow {
                task: "cls".into(),
                model: model_name(a),
                fold: "all".into(),
                metric: "AUROC".into(),
                point: d.auc_a,
                ci_low: d.ci_a.0,
                ci_high: d.ci_a.1,
                p_vs_reference: None,
                stars: String::new(),
            },
            EvalRow {
                task: "cls".into(),
                model: model_name(b),
                fold: "all".into(),
                metric: "AUROC".into(),
                point: d.auc_b,
                ci_low: d.ci_b.0,
                ci_high: d.ci_b.1,
                p_vs_reference: Some(d.comparison.p_value),
                stars: d.comparison.stars,
            },
        ])
    } else {
        // Multi-class: macro one-vs-rest AUROC, bootstrap CI and p-value.
        let n = labels.len();
        let macro_of = |scores: &[Vec<f64>], idx: &[usize]| -> Option<f64> {
            let s: Vec<Vec<f64>> = idx.iter().map(|&i| scores[i].clone()).collect();
            let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            auroc_macro(&s, &l).ok()
        };
        let point_a = auroc_macro(&scores_a, &labels)?;
        let point_b = auroc_macro(&scores_b, &labels)?;
        let ci_a = bootstrap_ci(
            n,
            DEFAULT_RESAMPLES,
            derive_seed(seed, "eval", &[0]),
            |idx| macro_of(&scores_a, idx),
        )?;
        let ci_b = bootstrap_ci(
            n,
            DEFAULT_RESAMPLES,
            derive_seed(seed, "eval", &[1]),
            |idx| macro_of(&scores_b, idx),
        )?;
        // Two-sided bootstrap p on the paired macro-AUC difference.
        let diffs: Result<Vec<f64>> = (0..DEFAULT_RESAMPLES)
            .into_par_iter()
            .map(|r| {
                use rand::Rng;
                let mut rng = crate::rng::rng_from(seed, "eval-diff", &[r as u64]);
                let mut idx = vec![0usize; n];
                let cap = 10 * n;
                for attempt in 0.. {
                    if attempt >= cap {
                        return Err(Error::Stats(format!(
                            "replicate {r}: macro AUROC undefined after {cap} redraws"
                        )));
                    }
                    for v in idx.iter_mut() {
                        *v = rng.gen_range(0..n);
                    }
                    if let (Some(da), Some(db)) =
                        (macro_of(&scores_a, &idx), macro_of(&scores_b, &idx))
                    {
                        return Ok(da - db);
                    }
                }
                unreachable!()
            })
            .collect();
        let diffs = diffs?;
        let n_rep = diffs.len() as f64;
        let le = diffs.iter().filter(|&&d| d <= 0.0).count() as f64 / n_rep;
        let ge = diffs.iter().filter(|&&d| d >= 0.0).count() as f64 / n_rep;
        let p = (2.0 * le.min(ge)).min(1.0);
        Ok(vec![
            EvalRow {
                task: "cls".into(),
                model: model_name(a),
                fold: "all".into(),
                metric: "AUROC".into(),
                point: point_a,
                ci_low: ci_a.0,
                ci_high: ci_a.1,
                p_vs_reference: None,
                stars: String::new(),
            },
            EvalRow {
                task: "cls".into(),
                model: model_name(b),
                fold: "all".into(),
                metric: "AUROC".into(),
                point: point_b,
                ci_low: ci_b.0,
                ci_high: ci_b.1,
                p_vs_reference: Some(p),
                stars: significance_stars(p).to_string(),
            },
        ])
    }
}

pub fn cmd_evaluate(
    cfg: &EffectiveConfig,
    task: &str,
    a: &Path,
    b: &Path,
    out_dir: &Path,
) -> Result<()> {
    let rows = match task {
        "seg" => evaluate_seg(a, b, cfg.seed)?,
        "cls" => evaluate_cls(a, b, cfg.seed)?,
        other => {
            return Err(Error::InvalidArgument(format!(
                "task must be seg or cls, got {other:?}"
            )))
        }
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let out = out_dir.join("eval_results.csv");
    let mut guard = ArtifactGuard::new();
    guard.track(&out);
    write_eval_results(&out, &cfg.echo(), cfg.seed, &rows)?;
    guard.disarm();
    for r in &rows {
        let p = r
            .p_vs_reference
            .map(|v| format!(" p={v}{}", r.stars))
            .unwrap_or_default();
        println!(
            "{} {}: {} = {:.4} ({:.4}, {:.4}){}",
            r.task, r.model, r.metric, r.point, r.ci_low, r.ci_high, p
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_efficiency_sweep(
    cfg: &EffectiveConfig,
    manifest_path: &Path,
    ckpt_path: Option<&Path>,
    policy: Option<TransferPolicy>,
    fractions: &[f64],
    fold_idx: usize,
    out_dir: &Path,
) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let n_classes = manifest.class_count;
    if n_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "manifest declares {n_classes} classes; segmentation needs at least 2"
        )));
    }
    let split = make_splits(&manifest, cfg.seed)?;
    let records = ingest_all(&manifest, cfg.model.image_size)?;
    let ckpt = match ckpt_path {
        Some(p) => Some(NamedTensorStore::load(p)?),
        None => None,
    };

    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let sub = subset_fraction(&split, fraction, cfg.seed)?;
        let fold = sub.folds.get(fold_idx).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "fold {fold_idx} out of range ({} folds)",
                sub.folds.len()
            ))
        })?;
        let milli = (fraction * 1000.0).round() as u64;
        let outcome = run_seg_fold(
            cfg,
            ckpt.as_ref(),
            policy,
            n_classes,
            &records,
            fold,
            derive_seed(cfg.seed, "sweep-init", &[milli]),
            derive_seed(cfg.seed, "sweep-train", &[milli]),
        )?;
        let values: Vec<f64> = outcome.per_case.iter().map(|(_, d)| *d).collect();
        let report = metric_report(
            MetricKind::Dice,
            &values,
            DEFAULT_RESAMPLES,
            derive_seed(cfg.seed, "sweep-ci", &[milli]),
        )?;
        println!(
            "fraction {fraction}: {} train images, mean dice {:.4} ({:.4}, {:.4})",
            fold.train.len(),
            report.point,
            report.ci_low,
            report.ci_high
        );
        rows.push((fraction, report.point, report.ci_low, report.ci_high));
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let out = out_dir.join("efficiency.csv");
    let mut guard = ArtifactGuard::new();
    guard.track(&out);
    write_sweep_results(&out, &cfg.echo(), cfg.seed, &rows)?;
    guard.disarm();
    println!("wrote {}", out.display());
    Ok(())
}

/// Render a checkpoint's metadata and tensor table.
pub fn inspect_text(store: &NamedTensorStore) -> String {
    use std::fmt::Write as _;
    let meta = &store.meta;
    let mut out = String::new();
    let _ = writeln!(out, "kind: {}", meta.kind);
    let _ = writeln!(out, "epoch: {}", meta.epoch);
    let _ = writeln!(out, "seed: {}", meta.seed);
    let _ = writeln!(
        out,
        "modality: {}",
        meta.modality.as_deref().unwrap_or("(none)")
    );
    if !meta.note.is_empty() {
        let _ = writeln!(out, "note: {}", meta.note);
    }
    let _ = writeln!(
        out,
        "config: {}",
        serde_json::to_string(&meta.config).expect("config serializes")
    );
    let _ = writeln!(out, "tensors: {}", store.len());
    let mut offset = 0u64;
    for (name, t) in store.iter() {
        let shape = t
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let bytes = t.len() * 4;
        let _ = writeln!(
            out,
            "  {name}  f32  [{shape}]  offset={offset}  bytes={bytes}"
        );
        offset += bytes as u64;
    }
    out
}

pub fn cmd_inspect(ckpt_path: &Path) -> Result<()> {
    let store = NamedTensorStore::load(ckpt_path)?;
    // Tolerate a closed pipe (e.g. piping into head).
    use std::io::Write as _;
    let _ = std::io::stdout().write_all(inspect_text(&store).as_bytes());
    Ok(())
}

/// Reconstruct a parameter store from a checkpoint (for tests and tools).
pub fn params_from_ckpt(store: &NamedTensorStore) -> ParamStore<f32> {
    store.to_params()
}
