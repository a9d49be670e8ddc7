//! Finite-difference verification of every differentiable operation at f64.

mod common;

use common::{check_input_grad, check_param_grads, randomize_params, uniform_vec};
use swinmae::config::ModelConfig;
use swinmae::data::{ImageRecord, Modality};
use swinmae::mae::{mae_loss, mae_loss_backward, MaeModel};
use swinmae::nn::attention::{attention_backward, attention_forward};
use swinmae::nn::{AttnParams, BlockLayout, FinalExpand, PatchExpand, PatchMerge, WindowGeometry};
use swinmae::store::{GradStore, ParamStore};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn attention_gradients_single_window() {
    // 2x2 window, one head, every parameter and input entry probed.
    let attn = AttnParams::new("a", 4, 1, true);
    let geom = WindowGeometry::new((2, 2), 2, 0).unwrap();
    let mut params = ParamStore::<f64>::init(&attn.specs(2), 1).unwrap();
    randomize_params(&mut params, 2, 0.5);
    let x = uniform_vec(3, 4 * 4, -1.0, 1.0);
    let w = uniform_vec(4, 4 * 4, -1.0, 1.0);

    let loss = |p: &ParamStore<f64>, xs: &[f64]| -> f64 {
        dot(&attention_forward(p, &attn, &geom, xs).0, &w)
    };
    let (_, cache) = attention_forward(&params, &attn, &geom, &x);
    let mut grads = GradStore::new();
    let dx = attention_backward(&params, &mut grads, &attn, &geom, &cache, &w);

    let worst = check_param_grads(&params, &grads, |p| loss(p, &x), 1e-5, 0);
    assert!(worst.rel < 1e-4, "param {worst:?}");
    let worst = check_input_grad(&x, &dx, |xs| loss(&params, xs), 1e-5, 1);
    assert!(worst.rel < 1e-4, "input {worst:?}");
}

#[test]
fn attention_gradients_shifted_masked_multihead() {
    // 4x4 grid, window 2, shift 1: masked windows exercise the -inf path.
    let dim = 8;
    let attn = AttnParams::new("a", dim, 2, true);
    let geom = WindowGeometry::new((4, 4), 2, 1).unwrap();
    assert!(geom.masks.iter().any(|m| m.is_some()));
    let mut params = ParamStore::<f64>::init(&attn.specs(2), 5).unwrap();
    randomize_params(&mut params, 6, 0.4);
    let n = 16 * dim;
    let x = uniform_vec(7, n, -1.0, 1.0);
    let w = uniform_vec(8, n, -1.0, 1.0);

    let loss = |p: &ParamStore<f64>, xs: &[f64]| -> f64 {
        dot(&attention_forward(p, &attn, &geom, xs).0, &w)
    };
    let (_, cache) = attention_forward(&params, &attn, &geom, &x);
    let mut grads = GradStore::new();
    let dx = attention_backward(&params, &mut grads, &attn, &geom, &cache, &w);

    let worst = check_param_grads(&params, &grads, |p| loss(p, &x), 1e-5, 16);
    assert!(worst.rel < 1e-4, "param {worst:?}");
    let worst = check_input_grad(&x, &dx, |xs| loss(&params, xs), 1e-5, 3);
    assert!(worst.rel < 1e-4, "input {worst:?}");
}

#[test]
fn swin_block_gradients_both_variants() {
    // Full block on a 4x4 grid, C=8, 2 heads; shifted and unshifted.
    for shift in [0usize, 1] {
        let blk = BlockLayout::new("b", (4, 4), 8, 2, 2, shift, 2.0, true).unwrap();
        let mut params = ParamStore::<f64>::init(&blk.specs(), 11).unwrap();
        randomize_params(&mut params, 12 + shift as u64, 0.3);
        let n = 16 * 8;
        let x = uniform_vec(13, n, -1.0, 1.0);
        let w = uniform_vec(14, n, -1.0, 1.0);

        let loss = |p: &ParamStore<f64>, xs: &[f64]| -> f64 { dot(&blk.forward(p, xs).0, &w) };
        let (_, cache) = blk.forward(&params, &x);
        let mut grads = GradStore::new();
        let dx = blk.backward(&params, &mut grads, &cache, &w);

        let worst = check_param_grads(&params, &grads, |p| loss(p, &x), 1e-5, 12);
        assert!(worst.rel < 1e-3, "shift {shift} param {worst:?}");
        let worst = check_input_grad(&x, &dx, |xs| loss(&params, xs), 1e-5, 5);
        assert!(worst.rel < 1e-3, "shift {shift} input {worst:?}");
    }
}

#[test]
fn patch_merge_gradients() {
    let merge = PatchMerge::new("m", (4, 4), 6).unwrap();
    let mut params = ParamStore::<f64>::init(&merge.specs(), 21).unwrap();
    randomize_params(&mut params, 22, 0.4);
    let x = uniform_vec(23, 16 * 6, -1.0, 1.0);
    let w = uniform_vec(24, 4 * 12, -1.0, 1.0);

    let loss = |p: &ParamStore<f64>, xs: &[f64]| -> f64 { dot(&merge.forward(p, xs).0, &w) };
    let (_, cache) = merge.forward(&params, &x);
    let mut grads = GradStore::new();
    let dx = merge.backward(&params, &mut grads, &cache, &w);

    let worst = check_param_grads(&params, &grads, |p| loss(p, &x), 1e-5, 0);
    assert!(worst.rel < 1e-3, "param {worst:?}");
    let worst = check_input_grad(&x, &dx, |xs| loss(&params, xs), 1e-5, 1);
    assert!(worst.rel < 1e-3, "input {worst:?}");
}

#[test]
fn patch_expand_gradients() {
    let expand = PatchExpand::new("e", (2, 2), 8).unwrap();
    let mut params = ParamStore::<f64>::init(&expand.specs(), 31).unwrap();
    randomize_params(&mut params, 32, 0.4);
    let x = uniform_vec(33, 4 * 8, -1.0, 1.0);
    let w = uniform_vec(34, 16 * 4, -1.0, 1.0);

    let loss = |p: &ParamStore<f64>, xs: &[f64]| -> f64 { dot(&expand.forward(p, xs).0, &w) };
    let (_, cache) = expand.forward(&params, &x);
    let mut grads = GradStore::new();
    let dx = expand.backward(&params, &mut grads, &cache, &w);

    let worst = check_param_grads(&params, &grads, |p| loss(p, &x), 1e-5, 0);
    assert!(worst.rel < 1e-3, "param {worst:?}");
    let worst = check_input_grad(&x, &dx, |xs| loss(&params, xs), 1e-5, 1);
    assert!(worst.rel < 1e-3, "input {worst:?}");
}

#[test]
fn final_expand_gradients() {
    let fexp = FinalExpand::new("f", (2, 2), 4, 4);
    let mut params = ParamStore::<f64>::init(&fexp.specs(), 41).unwrap();
    randomize_params(&mut params, 42, 0.4);
    let x = uniform_vec(43, 4 * 4, -1.0, 1.0);
    let w = uniform_vec(44, 64 * 4, -1.0, 1.0);

    let loss = |p: &ParamStore<f64>, xs: &[f64]| -> f64 { dot(&fexp.forward(p, xs).0, &w) };
    let (_, cache) = fexp.forward(&params, &x);
    let mut grads = GradStore::new();
    let dx = fexp.backward(&params, &mut grads, &cache, &w);

    let worst = check_param_grads(&params, &grads, |p| loss(p, &x), 1e-5, 24);
    assert!(worst.rel < 1e-3, "param {worst:?}");
    let worst = check_input_grad(&x, &dx, |xs| loss(&params, xs), 1e-5, 1);
    assert!(worst.rel < 1e-3, "input {worst:?}");
}

fn tiny_mae_cfg() -> ModelConfig {
    ModelConfig {
        image_size: (16, 16),
        in_channels: 1,
        patch: 4,
        embed_dim: 8,
        enc_depths: vec![2, 2],
        enc_heads: vec![2, 2],
        dec_depths: vec![2],
        window: 2,
        mlp_ratio: 2.0,
        mask_ratio: 0.75,
        patch_norm_target: false,
        masked_loss_only: true,
        use_rel_bias: true,
    }
}

#[test]
fn full_mae_gradients_on_toy_image() {
    // End to end: patches -> embed/mask -> encoder -> decoder -> head ->
    // masked MSE, differentiated w.r.t. every parameter and the raw patches.
    let cfg = tiny_mae_cfg();
    let mut model = MaeModel::<f64>::build(&cfg, 51).unwrap();
    randomize_params(&mut model.params, 52, 0.3);

    let px = uniform_vec(53, 256, 0.0, 1.0)
        .iter()
        .map(|&v| v as f32)
        .collect::<Vec<f32>>();
    let img = ImageRecord::new("g".into(), Modality::Synth, 16, 16, 1, px, None, None).unwrap();
    let patches = model.image_patches(&img).unwrap();
    let target = model.image_targets(&img).unwrap();
    let plan = model.sample_plan(54).unwrap();
    let d = cfg.patch_dim();

    let loss_of = |m: &MaeModel<f64>, pats: &[f64]| -> f64 {
        let (pred, _) = m.forward_patches(pats, &plan);
        mae_loss(&pred, &target, d, &plan, true).unwrap()
    };
    let (pred, cache) = model.forward_patches(&patches, &plan);
    let (_, d_pred) = mae_loss_backward(&pred, &target, d, &plan, true).unwrap();
    let grads = model.backward(&cache, &d_pred);

    // Parameter sweep through a cloned model so the layout is shared.
    let mut worst = common::WorstEntry::none();
    let mut probe = model.clone();
    for (name, tensor) in model.params.iter() {
        let g = grads
            .get(name)
            .unwrap_or_else(|| panic!("no gradient recorded for {name}"));
        let len = tensor.len();
        let stride = (len / 6).max(1);
        for i in (0..len).step_by(stride) {
            let base = tensor.data()[i];
            let numeric = common::central_diff(
                |v| {
                    probe.params.get_mut(name).data_mut()[i] = v;
                    loss_of(&probe, &patches)
                },
                base,
                1e-5,
            );
            worst.update(
                common::rel_err(g.data()[i], numeric),
                format!("{name}[{i}]"),
                g.data()[i],
                numeric,
            );
        }
    }
    assert!(worst.rel < 1e-3, "param {worst:?}");

    // Input gradient: masked patches must carry exactly zero, unmasked ones
    // must match finite differences.
    let (_, d_patches) = model.backward_full(&cache, &d_pred);
    for (idx, chunk) in d_patches.chunks(d).enumerate() {
        if plan.is_masked(idx) {
            assert!(chunk.iter().all(|&g| g == 0.0), "masked patch {idx}");
        }
    }
    let mut worst = common::WorstEntry::none();
    let mut probe_x = patches.clone();
    for i in (0..patches.len()).step_by(7) {
        let base = patches[i];
        let numeric = common::central_diff(
            |v| {
                probe_x[i] = v;
                loss_of(&model, &probe_x)
            },
            base,
            1e-5,
        );
        worst.update(
            common::rel_err(d_patches[i], numeric),
            format!("patch[{i}]"),
            d_patches[i],
            numeric,
        );
    }
    assert!(worst.rel < 1e-3, "input {worst:?}");
}

#[test]
fn classifier_head_and_full_model_gradients() {
    let cfg = ModelConfig {
        image_size: (16, 16),
        in_channels: 1,
        patch: 4,
        embed_dim: 8,
        enc_depths: vec![1, 1],
        enc_heads: vec![2, 2],
        dec_depths: vec![1],
        window: 2,
        mlp_ratio: 2.0,
        mask_ratio: 0.75,
        patch_norm_target: false,
        masked_loss_only: true,
        use_rel_bias: true,
    };
    let mut model = swinmae::adapt::ClsModel::<f64>::build(&cfg, 3, 61).unwrap();
    randomize_params(&mut model.params, 62, 0.3);
    let patches = uniform_vec(63, 16 * 16, 0.0, 1.0);
    let target = [1usize];

    let loss_of = |m: &swinmae::adapt::ClsModel<f64>, pats: &[f64]| -> f64 {
        let (logits, _) = m.forward(pats);
        swinmae::optim::ce_loss(&logits, 3, &target).unwrap()
    };
    let (logits, cache) = model.forward(&patches);
    let (_, d_logits) = swinmae::optim::ce_loss_backward(&logits, 3, &target).unwrap();
    let grads = model.backward(&cache, &d_logits);

    let mut probe = model.clone();
    let mut worst = common::WorstEntry::none();
    let mut head_worst = common::WorstEntry::none();
    for (name, tensor) in model.params.iter() {
        let g = grads.get(name).unwrap();
        let stride = (tensor.len() / 6).max(1);
        for i in (0..tensor.len()).step_by(stride) {
            let base = tensor.data()[i];
            let numeric = common::central_diff(
                |v| {
                    probe.params.get_mut(name).data_mut()[i] = v;
                    loss_of(&probe, &patches)
                },
                base,
                1e-5,
            );
            let rel = common::rel_err(g.data()[i], numeric);
            worst.update(rel, format!("{name}[{i}]"), g.data()[i], numeric);
            if name.starts_with("cls_head") {
                head_worst.update(rel, format!("{name}[{i}]"), g.data()[i], numeric);
            }
        }
    }
    assert!(head_worst.rel < 1e-4, "head {head_worst:?}");
    assert!(worst.rel < 1e-3, "param {worst:?}");
}

#[test]
fn segmenter_gradients_sampled() {
    let cfg = ModelConfig {
        image_size: (16, 16),
        in_channels: 1,
        patch: 4,
        embed_dim: 8,
        enc_depths: vec![1, 1],
        enc_heads: vec![2, 2],
        dec_depths: vec![1],
        window: 2,
        mlp_ratio: 2.0,
        mask_ratio: 0.75,
        patch_norm_target: false,
        masked_loss_only: true,
        use_rel_bias: true,
    };
    let mut model = swinmae::adapt::SegModel::<f64>::build(&cfg, 2, 71).unwrap();
    randomize_params(&mut model.params, 72, 0.3);
    let patches = uniform_vec(73, 16 * 16, 0.0, 1.0);
    let targets: Vec<usize> = (0..256).map(|i| usize::from(i % 5 == 0)).collect();

    let loss_of = |m: &swinmae::adapt::SegModel<f64>, pats: &[f64]| -> f64 {
        let (logits, _) = m.forward(pats);
        swinmae::optim::seg_loss(&logits, 2, &targets, 0.5, 0.5).unwrap()
    };
    let (logits, cache) = model.forward(&patches);
    let (_, d_logits) = swinmae::optim::seg_loss_backward(&logits, 2, &targets, 0.5, 0.5).unwrap();
    let grads = model.backward(&cache, &d_logits);

    let mut probe = model.clone();
    let mut worst = common::WorstEntry::none();
    for (name, tensor) in model.params.iter() {
        let g = grads.get(name).unwrap();
        let stride = (tensor.len() / 4).max(1);
        for i in (0..tensor.len()).step_by(stride) {
            let base = tensor.data()[i];
            let numeric = common::central_diff(
                |v| {
                    probe.params.get_mut(name).data_mut()[i] = v;
                    loss_of(&probe, &patches)
                },
                base,
                1e-5,
            );
            worst.update(
                common::rel_err(g.data()[i], numeric),
                format!("{name}[{i}]"),
                g.data()[i],
                numeric,
            );
        }
    }
    assert!(worst.rel < 1e-3, "param {worst:?}");
}
