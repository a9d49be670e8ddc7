//! Evaluation statistics: Dice and AUROC metrics, bootstrap confidence
//! intervals, DeLong's test for correlated AUCs, paired t-tests, and
//! cross-validation orchestration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Fold, SplitAssignment};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

pub const DEFAULT_RESAMPLES: usize = 1000;
/// Two-sided 95% normal quantile.
pub const Z_975: f64 = 1.959963984540054;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "DICE")]
    Dice,
    #[serde(rename = "AUROC")]
    Auroc,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Dice => "DICE",
            MetricKind::Auroc => "AUROC",
        }
    }
}

/// Point estimate with a bootstrap confidence interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: MetricKind,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_resamples: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestKind {
    #[serde(rename = "PAIRED_T")]
    PairedT,
    #[serde(rename = "DELONG")]
    Delong,
}

/// Two-sided test outcome with the significance stars convention
/// (* p<0.05, ** p<0.01, *** p<0.001).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub test: TestKind,
    pub statistic: f64,
    pub p_value: f64,
    pub stars: String,
    /// Set when the sampling distribution collapsed (zero variance).
    pub degenerate: bool,
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

// ---------------------------------------------------------------------------
// Special functions (ln-gamma, incomplete beta/gamma) for exact CDFs.
// ---------------------------------------------------------------------------

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g=7, n=9.
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the regularized incomplete beta function.
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
pub fn betai(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let bt = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * betacf(a, b, x) / a
    } else {
        1.0 - bt * betacf(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value of a t statistic with `dof` degrees of freedom:
/// I_{nu/(nu+t^2)}(nu/2, 1/2).
pub fn t_two_sided_p(t: f64, dof: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    betai(dof / 2.0, 0.5, dof / (dof + t * t))
}

/// Standard normal CDF via the regularized incomplete gamma function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    gammq(0.5, x * x)
}

/// Regularized upper incomplete gamma Q(a, x).
fn gammq(a: f64, x: f64) -> f64 {
    if x < a + 1.0 {
        1.0 - gser(a, x)
    } else {
        gcf(a, x)
    }
}

fn gser(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let gln = ln_gamma(a);
    let mut ap = a;
    let mut sum = 1.0 / a;
    let mut del = sum;
    for _ in 0..300 {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (-x + a * x.ln() - gln).exp()
}

fn gcf(a: f64, x: f64) -> f64 {
    const FPMIN: f64 = 1e-300;
    let gln = ln_gamma(a);
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / FPMIN;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..300 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = b + an / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x + a * x.ln() - gln).exp() * h
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Per-class and mean Dice between index masks. Classes where prediction and
/// ground truth are both empty score 1.0. Background (class 0) is excluded
/// from the mean unless `include_background`.
pub fn dice_score(
    pred: &[u32],
    gt: &[u32],
    n_classes: usize,
    include_background: bool,
) -> Result<(Vec<f64>, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::Stats(format!(
            "prediction ({}) and ground truth ({}) sizes differ",
            pred.len(),
            gt.len()
        )));
    }
    if n_classes == 0 {
        return Err(Error::Stats("need at least one class".into()));
    }
    let mut inter = vec![0u64; n_classes];
    let mut p_count = vec![0u64; n_classes];
    let mut g_count = vec![0u64; n_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= n_classes || g >= n_classes {
            return Err(Error::Stats(format!(
                "class index {} out of range for {n_classes} classes",
                p.max(g)
            )));
        }
        p_count[p] += 1;
        g_count[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    let per_class: Vec<f64> = (0..n_classes)
        .map(|k| {
            if p_count[k] + g_count[k] == 0 {
                1.0
            } else {
                2.0 * inter[k] as f64 / (p_count[k] + g_count[k]) as f64
            }
        })
        .collect();
    let start = usize::from(!include_background);
    if start >= n_classes {
        return Err(Error::Stats(
            "no foreground classes left after excluding background".into(),
        ));
    }
    let mean = per_class[start..].iter().sum::<f64>() / (n_classes - start) as f64;
    Ok((per_class, mean))
}

/// Mann-Whitney AUROC over binary labels, computed through midranks; tied
/// scores count one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Stats("scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Stats(
            "AUROC undefined: both classes must be present".into(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Stats(format!("label {bad} is not binary")));
    }
    let ranks = midranks(scores);
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| *r)
        .sum();
    let p = pos as f64;
    let n = neg as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// 1-based ranks with ties averaged.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite scores"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Macro one-vs-rest AUROC over per-class score rows. Classes without both a
/// positive and a negative example are skipped; at least one class must be
/// evaluable.
pub fn auroc_macro(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Stats("empty or mismatched score table".into()));
    }
    let n_classes = scores[0].len();
    let mut aucs = Vec::new();
    for k in 0..n_classes {
        let bin: Vec<u8> = labels.iter().map(|&l| u8::from(l == k)).collect();
        let pos = bin.iter().filter(|&&b| b == 1).count();
        if pos == 0 || pos == bin.len() {
            continue;
        }
        let s: Vec<f64> = scores.iter().map(|row| row[k]).collect();
        aucs.push(auroc(&s, &bin)?);
    }
    if aucs.is_empty() {
        return Err(Error::Stats(
            "no class has both positive and negative examples".into(),
        ));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

/// Percentile bootstrap 95% CI of `metric` over index resamples of 0..n.
/// Replicate r draws from a stream derived from (seed, r), so any worker
/// count produces identical intervals. Undefined replicates (metric returns
/// None) are redrawn, capped at 10n attempts each.
pub fn bootstrap_ci<F>(n: usize, n_resamples: usize, seed: u64, metric: F) -> Result<(f64, f64)>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    if n < 2 {
        return Err(Error::Stats("bootstrap needs at least 2 cases".into()));
    }
    let values: Result<Vec<f64>> = (0..n_resamples)
        .into_par_iter()
        .map(|r| {
            use rand::Rng;
            let mut rng = rng_from(seed, "bootstrap", &[r as u64]);
            let mut idx = vec![0usize; n];
            let cap = 10 * n;
            for attempt in 0.. {
                if attempt >= cap {
                    return Err(Error::Stats(format!(
                        "replicate {r}: metric undefined after {cap} redraws"
                    )));
                }
                for v in idx.iter_mut() {
                    *v = rng.gen_range(0..n);
                }
                if let Some(v) = metric(&idx) {
                    return Ok(v);
                }
            }
            unreachable!()
        })
        .collect();
    let mut values = values?;
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    Ok((percentile(&values, 0.025), percentile(&values, 0.975)))
}

/// Linear-interpolation percentile on sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// Convenience: mean metric with its bootstrap CI as a [`MetricReport`].
pub fn metric_report(
    kind: MetricKind,
    values: &[f64],
    n_resamples: usize,
    seed: u64,
) -> Result<MetricReport> {
    if values.is_empty() {
        return Err(Error::Stats("no values to report".into()));
    }
    let point = values.iter().sum::<f64>() / values.len() as f64;
    let (ci_low, ci_high) = if values.len() == 1 {
        (point, point)
    } else {
        bootstrap_ci(values.len(), n_resamples, seed, |idx| {
            Some(idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64)
        })?
    };
    Ok(MetricReport {
        metric: kind,
        point,
        ci_low,
        ci_high,
        n_resamples,
        seed,
    })
}

// ---------------------------------------------------------------------------
// DeLong's test
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DelongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub ci_a: (f64, f64),
    pub ci_b: (f64, f64),
    pub delta: f64,
    pub comparison: ComparisonResult,
}

/// Per-case structural components plus the exact pairwise psi total.
/// Partial sums of psi are half-integers and stay exactly representable, so
/// total / (P*N) reproduces the midrank AUROC bit for bit.
fn structural_components(scores: &[f64], labels: &[u8]) -> (Vec<f64>, Vec<f64>, f64) {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(s, _)| *s)
        .collect();
    let psi = |x: f64, y: f64| -> f64 {
        if x > y {
            1.0
        } else if x == y {
            0.5
        } else {
            0.0
        }
    };
    let row_sums: Vec<f64> = pos
        .iter()
        .map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>())
        .collect();
    let total: f64 = row_sums.iter().sum();
    let v10: Vec<f64> = row_sums.iter().map(|&s| s / neg.len() as f64).collect();
    let v01: Vec<f64> = neg
        .iter()
        .map(|&y| pos.iter().map(|&x| psi(x, y)).sum::<f64>() / pos.len() as f64)
        .collect();
    (v10, v01, total)
}

fn cov(a: &[f64], mean_a: f64, b: &[f64], mean_b: f64) -> f64 {
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - mean_a) * (y - mean_b))
        .sum::<f64>()
        / (n - 1) as f64
}

/// DeLong's comparison of two correlated AUCs on paired scores, including
/// per-model variances and 95% CIs.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[u8]) -> Result<DelongResult> {
    if scores_a.len() != labels.len() || scores_b.len() != labels.len() {
        return Err(Error::Stats(
            "paired scores must match the label vector".into(),
        ));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Stats(
            "DeLong undefined: both classes must be present".into(),
        ));
    }
    let (v10_a, v01_a, total_a) = structural_components(scores_a, labels);
    let (v10_b, v01_b, total_b) = structural_components(scores_b, labels);
    let auc_a = total_a / (pos as f64 * neg as f64);
    let auc_b = total_b / (pos as f64 * neg as f64);

    let s10_aa = cov(&v10_a, auc_a, &v10_a, auc_a);
    let s10_bb = cov(&v10_b, auc_b, &v10_b, auc_b);
    let s10_ab = cov(&v10_a, auc_a, &v10_b, auc_b);
    let s01_aa = cov(&v01_a, auc_a, &v01_a, auc_a);
    let s01_bb = cov(&v01_b, auc_b, &v01_b, auc_b);
    let s01_ab = cov(&v01_a, auc_a, &v01_b, auc_b);

    let p = pos as f64;
    let n = neg as f64;
    let var_a = s10_aa / p + s01_aa / n;
    let var_b = s10_bb / p + s01_bb / n;
    let var_delta = (s10_aa + s10_bb - 2.0 * s10_ab) / p + (s01_aa + s01_bb - 2.0 * s01_ab) / n;
    let delta = auc_a - auc_b;

    let (statistic, p_value, degenerate) = if var_delta <= 0.0 {
        if delta == 0.0 {
            (0.0, 1.0, true)
        } else {
            (f64::INFINITY * delta.signum(), 0.0, true)
        }
    } else {
        let z = delta / var_delta.sqrt();
        (z, erfc(z.abs() / std::f64::consts::SQRT_2), false)
    };
    let ci = |auc: f64, var: f64| {
        let half = Z_975 * var.max(0.0).sqrt();
        (auc - half, auc + half)
    };
    Ok(DelongResult {
        auc_a,
        auc_b,
        var_a,
        var_b,
        ci_a: ci(auc_a, var_a),
        ci_b: ci(auc_b, var_b),
        delta,
        comparison: ComparisonResult {
            test: TestKind::Delong,
            statistic,
            p_value,
            stars: significance_stars(p_value).to_string(),
            degenerate,
        },
    })
}

// ---------------------------------------------------------------------------
// Paired t-test
// ---------------------------------------------------------------------------

/// Two-sided paired t-test on per-case values; Student t with n-1 dof.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<ComparisonResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Stats(
            "paired t-test needs two equal-length samples of at least 2".into(),
        ));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 {
        if mean == 0.0 {
            return Ok(ComparisonResult {
                test: TestKind::PairedT,
                statistic: 0.0,
                p_value: 1.0,
                stars: String::new(),
                degenerate: true,
            });
        }
        // Identical nonzero differences: the statistic diverges and p -> 0.
        return Ok(ComparisonResult {
            test: TestKind::PairedT,
            statistic: f64::INFINITY * mean.signum(),
            p_value: 0.0,
            stars: significance_stars(0.0).to_string(),
            degenerate: false,
        });
    }
    let t = mean / (sd / n.sqrt());
    let p = t_two_sided_p(t, n - 1.0);
    Ok(ComparisonResult {
        test: TestKind::PairedT,
        statistic: t,
        p_value: p,
        stars: significance_stars(p).to_string(),
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Cross-validation orchestration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct FoldReport {
    pub fold: usize,
    pub report: MetricReport,
    pub per_case: Vec<(String, f64)>,
}

#[derive(Clone, Debug)]
pub struct CrossvalSummary {
    pub folds: Vec<FoldReport>,
    pub pooled: MetricReport,
}

/// Train/evaluate once per fold via the hook (which returns one metric value
/// per test case) and aggregate per-fold and pooled reports with bootstrap
/// CIs. Hook failures propagate tagged with the fold index.
pub fn crossval_run<F>(
    split: &SplitAssignment,
    kind: MetricKind,
    n_resamples: usize,
    seed: u64,
    mut trainer: F,
) -> Result<CrossvalSummary>
where
    F: FnMut(usize, &Fold) -> Result<Vec<(String, f64)>>,
{
    let mut folds = Vec::with_capacity(split.folds.len());
    let mut pooled_values = Vec::new();
    for (fold_idx, fold) in split.folds.iter().enumerate() {
        let per_case = trainer(fold_idx, fold).map_err(|e| Error::Fold {
            fold: fold_idx,
            source: Box::new(e),
        })?;
        let expected: std::collections::BTreeSet<&String> = fold.test.iter().collect();
        let got: std::collections::BTreeSet<&String> = per_case.iter().map(|(id, _)| id).collect();
        if expected != got || per_case.len() != fold.test.len() {
            return Err(Error::Fold {
                fold: fold_idx,
                source: Box::new(Error::Stats(
                    "trainer must return exactly one value per test case".into(),
                )),
            });
        }
        let values: Vec<f64> = per_case.iter().map(|(_, v)| *v).collect();
        let fold_seed = derive_seed(seed, "fold-ci", &[fold_idx as u64]);
        folds.push(FoldReport {
            fold: fold_idx,
            report: metric_report(kind, &values, n_resamples, fold_seed)?,
            per_case: per_case.clone(),
        });
        pooled_values.extend(values);
    }
    let pooled = metric_report(
        kind,
        &pooled_values,
        n_resamples,
        derive_seed(seed, "pooled-ci", &[]),
    )?;
    Ok(CrossvalSummary { folds, pooled })
}
