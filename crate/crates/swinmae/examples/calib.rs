//! Throwaway calibration driver for the acceptance experiments.

use swinmae::adapt::{transfer_weights, SegModel, TransferPolicy};
use swinmae::ckpt::NamedTensorStore;
use swinmae::config::ModelConfig;
use swinmae::data::{ingest_image, load_manifest, make_splits, subset_fraction, ImageRecord};
use swinmae::optim::ScheduleConfig;
use swinmae::rng::derive_seed;
use swinmae::train::{eval_seg, finetune_seg, FinetuneOpts};

fn binarize(records: &mut [ImageRecord]) {
    for r in records.iter_mut() {
        if let Some(mask) = r.seg_mask.as_mut() {
            for v in mask.iter_mut() {
                *v = u32::from(*v > 0);
            }
        }
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let manifest_path = &args[1];
    let ckpt_path = args.get(2).filter(|s| !s.is_empty()).cloned();
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(100);
    let frac: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.0556);
    let seed: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0);
    let lr: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let manifest = load_manifest(std::path::Path::new(manifest_path)).unwrap();
    let split = make_splits(&manifest, 2024).unwrap();
    let split = subset_fraction(&split, frac, 2024).unwrap();
    let fold = &split.folds[0];
    let mut records: std::collections::BTreeMap<String, ImageRecord> = manifest
        .entries
        .iter()
        .map(|e| {
            let r = ingest_image(&manifest, e, (64, 64)).unwrap();
            (r.id.clone(), r)
        })
        .collect();
    {
        let mut all: Vec<ImageRecord> = records.values().cloned().collect();
        binarize(&mut all);
        records = all.into_iter().map(|r| (r.id.clone(), r)).collect();
    }
    let train: Vec<ImageRecord> = fold.train.iter().map(|id| records[id].clone()).collect();
    let val: Vec<ImageRecord> = fold.val.iter().map(|id| records[id].clone()).collect();
    let test: Vec<ImageRecord> = fold.test.iter().map(|id| records[id].clone()).collect();
    eprintln!("train {} val {} test {}", train.len(), val.len(), test.len());

    let cfg = ModelConfig::toy();
    let init_seed = derive_seed(2024, "calib", &[seed]);
    let mut model = SegModel::<f32>::build(&cfg, 2, init_seed).unwrap();
    if let Some(p) = &ckpt_path {
        let store = NamedTensorStore::load(std::path::Path::new(p)).unwrap();
        let specs = model.specs();
        transfer_weights(
            &store,
            &mut model.params,
            &specs,
            TransferPolicy::RadiologicalSeg,
            init_seed,
        )
        .unwrap();
        eprintln!("transferred from {p}");
    }
    let sched = ScheduleConfig::new(lr, 10, epochs);
    let opts = FinetuneOpts {
        batch_size: 8,
        epochs,
        seed: derive_seed(2024, "calib-train", &[seed]),
        w_dice: 0.5,
        w_ce: 0.5,
        val_every: 5,
    };
    let t0 = std::time::Instant::now();
    let log = finetune_seg(&mut model, &train, &val, &sched, &opts).unwrap();
    let best_val = log
        .iter()
        .map(|e| e.val_metric)
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    let per_case = eval_seg(&model, &test).unwrap();
    let mean = per_case.iter().map(|(_, d)| d).sum::<f64>() / per_case.len() as f64;
    println!(
        "epochs={epochs} frac={frac} seed={seed} lr={lr} best_val={best_val:.4} test_dice={mean:.4} secs={:.0}",
        t0.elapsed().as_secs_f64()
    );
}
