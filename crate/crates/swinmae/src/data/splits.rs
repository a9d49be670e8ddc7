//! Split assignment: 5-fold cross-validation with a 9:1 train/val split for
//! small datasets, 72/8/20 holdout for large ones, and nested
//! label-efficiency subsets.

use serde::{Deserialize, Serialize};

use super::DatasetManifest;
use crate::error::{Error, Result};
use crate::rng::{permutation, rng_from};

/// Datasets below this many entries use cross-validation.
pub const KFOLD_THRESHOLD: usize = 4000;
pub const KFOLD_FOLDS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitPolicy {
    #[serde(rename = "KFOLD_CV")]
    KfoldCv,
    #[serde(rename = "HOLDOUT")]
    Holdout,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub policy: SplitPolicy,
    pub folds: Vec<Fold>,
    /// Label-efficiency subset fraction currently applied to train sets.
    pub fraction: f64,
    pub seed: u64,
}

/// Assign splits by the entry-count rule (or the manifest's explicit policy
/// override). Shuffling is driven solely by the seed.
pub fn make_splits(manifest: &DatasetManifest, seed: u64) -> Result<SplitAssignment> {
    let n = manifest.entries.len();
    if n == 0 {
        return Err(Error::Split("manifest is empty".into()));
    }
    let policy = manifest.policy.unwrap_or(if n < KFOLD_THRESHOLD {
        SplitPolicy::KfoldCv
    } else {
        SplitPolicy::Holdout
    });
    if policy == SplitPolicy::KfoldCv && n < 10 {
        return Err(Error::Split(format!(
            "{n} entries cannot satisfy 5-fold cross-validation with a 9:1 train/val split"
        )));
    }

    let mut rng = rng_from(seed, "split", &[]);
    let order = permutation(&mut rng, n);
    let ids: Vec<String> = order
        .iter()
        .map(|&i| manifest.entries[i].id.clone())
        .collect();

    let folds = match policy {
        SplitPolicy::KfoldCv => {
            // Contiguous chunks of the shuffled ids; remainder spread over the
            // first folds. Every id lands in exactly one test fold.
            let base = n / KFOLD_FOLDS;
            let rem = n % KFOLD_FOLDS;
            let mut bounds = Vec::with_capacity(KFOLD_FOLDS + 1);
            let mut at = 0;
            bounds.push(0);
            for f in 0..KFOLD_FOLDS {
                at += base + usize::from(f < rem);
                bounds.push(at);
            }
            (0..KFOLD_FOLDS)
                .map(|f| {
                    let test: Vec<String> = ids[bounds[f]..bounds[f + 1]].to_vec();
                    let rest: Vec<String> = ids[..bounds[f]]
                        .iter()
                        .chain(&ids[bounds[f + 1]..])
                        .cloned()
                        .collect();
                    // 9:1 within the non-test portion; floor for val,
                    // remainder to train, but never an empty val set.
                    let n_val = (rest.len() / 10).max(1);
                    let val = rest[rest.len() - n_val..].to_vec();
                    let train = rest[..rest.len() - n_val].to_vec();
                    Fold { train, val, test }
                })
                .collect()
        }
        SplitPolicy::Holdout => {
            let n_test = n * 20 / 100;
            let n_val = n * 8 / 100;
            let n_train = n - n_test - n_val;
            vec![Fold {
                train: ids[..n_train].to_vec(),
                val: ids[n_train..n_train + n_val].to_vec(),
                test: ids[n_train + n_val..].to_vec(),
            }]
        }
    };

    Ok(SplitAssignment {
        policy,
        folds,
        fraction: 1.0,
        seed,
    })
}

/// Shrink each fold's train set to ceil(fraction * |train|) ids, taken as a
/// prefix of a seed-determined permutation so that subsets nest across
/// fractions. Val and test sets are untouched.
pub fn subset_fraction(
    split: &SplitAssignment,
    fraction: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "subset fraction {fraction} outside (0, 1]"
        )));
    }
    if fraction == 1.0 {
        return Ok(split.clone());
    }
    let mut out = split.clone();
    out.fraction = fraction;
    for (fold_idx, fold) in out.folds.iter_mut().enumerate() {
        let keep = (fraction * fold.train.len() as f64).ceil() as usize;
        let mut rng = rng_from(seed, "subset", &[fold_idx as u64]);
        let perm = permutation(&mut rng, fold.train.len());
        fold.train = perm[..keep]
            .iter()
            .map(|&i| fold.train[i].clone())
            .collect();
    }
    Ok(out)
}
