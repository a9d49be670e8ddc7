//! AdamW with decoupled weight decay, the warmup + half-cycle cosine
//! learning-rate schedule, and the downstream loss functions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{GradStore, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl ScheduleConfig {
    pub fn new(base_lr: f64, warmup_epochs: usize, total_epochs: usize) -> Self {
        ScheduleConfig {
            base_lr,
            warmup_epochs,
            total_epochs,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup {} must be shorter than the schedule {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// Learning rate at a (fractional) epoch: linear warmup from zero, then a
/// half-cycle cosine down to exactly zero at the last epoch.
pub fn lr_at(sched: &ScheduleConfig, epoch: f64) -> Result<f64> {
    let total = sched.total_epochs as f64;
    let warmup = sched.warmup_epochs as f64;
    if !(0.0..=total).contains(&epoch) {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside schedule 0..={total}"
        )));
    }
    if epoch < warmup {
        Ok(sched.base_lr * epoch / warmup)
    } else {
        let progress = (epoch - warmup) / (total - warmup);
        Ok(sched.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Per-tensor first/second moment estimates plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct OptState<T> {
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptState<T> {
    pub fn new() -> Self {
        OptState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }
}

/// One AdamW step over every tensor that received a gradient. Weight decay
/// is decoupled: parameters shrink by (1 - lr * wd) before the Adam update.
/// Gradients must be finite; the offending tensor is named otherwise.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &GradStore<T>,
    state: &mut OptState<T>,
    sched: &ScheduleConfig,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(sched.betas.0);
    let b2 = T::from_f64(sched.betas.1);
    let one = T::one();
    let eps = T::from_f64(sched.eps);
    let lr_t = T::from_f64(lr);
    let decay = T::from_f64(1.0 - lr * sched.weight_decay);
    let corr1 = T::from_f64(1.0 - sched.betas.0.powi(t));
    let corr2 = T::from_f64(1.0 - sched.betas.1.powi(t));

    for (name, g) in grads.iter() {
        let p = params.get_mut(name);
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for i in 0..g.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (one - b1) * gi;
            let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / corr1;
            let vhat = vi / corr2;
            let pd = p.data_mut();
            pd[i] = pd[i] * decay - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Mean negative log-softmax of the target class over rows, stabilized by
/// max subtraction. Returns the loss and d(loss)/d(logits).
pub fn ce_loss_backward<T: Scalar>(
    logits: &[T],
    n_classes: usize,
    targets: &[usize],
) -> Result<(T, Vec<T>)> {
    let rows = targets.len();
    if logits.len() != rows * n_classes {
        return Err(Error::InvalidArgument(format!(
            "logit buffer {} does not match {rows} rows x {n_classes} classes",
            logits.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "class index {bad} out of range for {n_classes} classes"
        )));
    }
    let inv_n = T::one() / T::from_f64(rows as f64);
    let mut loss = T::zero();
    let mut dlogits = vec![T::zero(); logits.len()];
    for (r, &target) in targets.iter().enumerate() {
        let row = &logits[r * n_classes..(r + 1) * n_classes];
        let mut mx = T::neg_infinity();
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = T::zero();
        for &v in row {
            denom = denom + (v - mx).exp();
        }
        let log_denom = denom.ln();
        loss = loss + (log_denom - (row[target] - mx)) * inv_n;
        for k in 0..n_classes {
            let soft = (row[k] - mx).exp() / denom;
            let ind = if k == target { T::one() } else { T::zero() };
            dlogits[r * n_classes + k] = (soft - ind) * inv_n;
        }
    }
    Ok((loss, dlogits))
}

pub fn ce_loss<T: Scalar>(logits: &[T], n_classes: usize, targets: &[usize]) -> Result<T> {
    ce_loss_backward(logits, n_classes, targets).map(|(l, _)| l)
}

pub const DICE_LOSS_EPS: f64 = 1.0;

/// Soft Dice loss over probability rows: 1 - mean over classes of
/// (2 sum(p*t) + eps) / (sum(p) + sum(t) + eps). Smoothed with eps = 1 for
/// training stability; the evaluation metric handles empties separately.
pub fn dice_loss_backward<T: Scalar>(
    probs: &[T],
    n_classes: usize,
    targets: &[usize],
) -> Result<(T, Vec<T>)> {
    let rows = targets.len();
    if probs.len() != rows * n_classes {
        return Err(Error::InvalidArgument(format!(
            "probability buffer {} does not match {rows} rows x {n_classes} classes",
            probs.len()
        )));
    }
    let eps = T::from_f64(DICE_LOSS_EPS);
    let mut num = vec![T::zero(); n_classes]; // 2 sum(p*t) + eps
    let mut den = vec![T::zero(); n_classes]; // sum(p) + sum(t) + eps
    for k in 0..n_classes {
        num[k] = eps;
        den[k] = eps;
    }
    for (r, &t) in targets.iter().enumerate() {
        if t >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "class index {t} out of range for {n_classes} classes"
            )));
        }
        for k in 0..n_classes {
            let p = probs[r * n_classes + k];
            den[k] = den[k] + p;
        }
        num[t] = num[t] + T::from_f64(2.0) * probs[r * n_classes + t];
        den[t] = den[t] + T::one();
    }
    let inv_k = T::one() / T::from_f64(n_classes as f64);
    let mut loss = T::one();
    for k in 0..n_classes {
        loss = loss - inv_k * num[k] / den[k];
    }
    let mut dprobs = vec![T::zero(); probs.len()];
    for (r, &t) in targets.iter().enumerate() {
        for k in 0..n_classes {
            let t_ind = if k == t { T::from_f64(2.0) } else { T::zero() };
            // d dice_k / d p_rk = (2*t - num/den) / den
            let d = (t_ind - num[k] / den[k]) / den[k];
            dprobs[r * n_classes + k] = -inv_k * d;
        }
    }
    Ok((loss, dprobs))
}

pub fn dice_loss<T: Scalar>(probs: &[T], n_classes: usize, targets: &[usize]) -> Result<T> {
    dice_loss_backward(probs, n_classes, targets).map(|(l, _)| l)
}

/// Combined segmentation objective on logits: w_dice * dice(softmax) +
/// w_ce * cross-entropy. Returns loss and d(loss)/d(logits).
pub fn seg_loss_backward<T: Scalar>(
    logits: &[T],
    n_classes: usize,
    targets: &[usize],
    w_dice: f64,
    w_ce: f64,
) -> Result<(T, Vec<T>)> {
    let rows = targets.len();
    let mut probs = logits.to_vec();
    crate::nn::ops::softmax_rows(&mut probs, n_classes);
    let (dice, mut d_dice_probs) = dice_loss_backward(&probs, n_classes, targets)?;
    crate::nn::ops::softmax_rows_backward(&probs, &mut d_dice_probs, n_classes);
    let (ce, d_ce) = ce_loss_backward(logits, n_classes, targets)?;
    let wd = T::from_f64(w_dice);
    let wc = T::from_f64(w_ce);
    let loss = wd * dice + wc * ce;
    let mut dl = vec![T::zero(); rows * n_classes];
    for i in 0..dl.len() {
        dl[i] = wd * d_dice_probs[i] + wc * d_ce[i];
    }
    Ok((loss, dl))
}

pub fn seg_loss<T: Scalar>(
    logits: &[T],
    n_classes: usize,
    targets: &[usize],
    w_dice: f64,
    w_ce: f64,
) -> Result<T> {
    seg_loss_backward(logits, n_classes, targets, w_dice, w_ce).map(|(l, _)| l)
}
