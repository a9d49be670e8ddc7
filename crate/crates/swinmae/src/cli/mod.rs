//! Command-line surface: argument parsing, config resolution, dispatch.

pub mod artifacts;
pub mod commands;
pub mod runconfig;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::adapt::TransferPolicy;
use crate::data::Modality;
use crate::error::{Error, Result};

use commands::FoldSel;
use runconfig::{resolve, EffectiveConfig, RunConfigFile};

#[derive(Parser, Debug)]
#[command(
    name = "swinmae",
    about = "Masked-autoencoder pretraining on a windowed-attention backbone, \
             with downstream segmentation/classification finetuning and \
             evaluation statistics",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// Run-configuration file (JSON); unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Profile: toy | paper.
    #[arg(long)]
    pub profile: Option<String>,
    /// Global seed; every random draw derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

impl CommonArgs {
    fn resolve(&self) -> Result<EffectiveConfig> {
        let file = match &self.config {
            Some(p) => RunConfigFile::load(p)?,
            None => RunConfigFile::default(),
        };
        resolve(&file, self.profile.as_deref(), self.seed)
    }
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate a synthetic shape corpus with masks and a manifest.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of images.
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Image size as HxW; defaults to the profile's input size.
        #[arg(long)]
        size: Option<String>,
        /// Foreground shape classes (2..=5).
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Background noise amplitude in [0, 1].
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
    },
    /// Self-supervised pretraining; writes a checkpoint and a loss CSV.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict to one modality and tag the checkpoint with it.
        #[arg(long)]
        modality: Option<String>,
    },
    /// Finetune the segmenter from a pretrained checkpoint or from scratch.
    FinetuneSeg {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Pretrained checkpoint (omit with --policy scratch).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// radiological-seg | color-seg | scratch.
        #[arg(long, default_value = "radiological-seg")]
        policy: String,
        /// Label-efficiency fraction of the training split, in (0, 1].
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        /// Fold index, or "all" for full cross-validation.
        #[arg(long, default_value = "0")]
        fold: String,
    },
    /// Finetune the classifier from a pretrained checkpoint or from scratch.
    FinetuneCls {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// classify | scratch.
        #[arg(long, default_value = "classify")]
        policy: String,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value = "0")]
        fold: String,
    },
    /// Compare two result files: point estimates, CIs, and a paired test.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// seg | cls.
        #[arg(long)]
        task: String,
        /// Reference result file.
        #[arg(long)]
        a: PathBuf,
        /// Candidate result file (p-value reported against --a).
        #[arg(long)]
        b: PathBuf,
    },
    /// Train at several training-data fractions and tabulate test Dice.
    EfficiencySweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "radiological-seg")]
        policy: String,
        /// Comma-separated fractions.
        #[arg(long, default_value = "0.1,0.5,0.8,1.0")]
        fractions: String,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Print a checkpoint's metadata and tensor table.
    Inspect {
        /// Checkpoint path.
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn parse_policy(s: &str) -> Result<Option<TransferPolicy>> {
    match s {
        "radiological-seg" => Ok(Some(TransferPolicy::RadiologicalSeg)),
        "color-seg" => Ok(Some(TransferPolicy::ColorSeg)),
        "classify" => Ok(Some(TransferPolicy::Classify)),
        "scratch" => Ok(None),
        other => Err(Error::InvalidArgument(format!(
            "unknown policy {other:?} (expected radiological-seg, color-seg, classify, or scratch)"
        ))),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() == 2 {
        if let (Ok(h), Ok(w)) = (parts[0].parse(), parts[1].parse()) {
            return Ok((h, w));
        }
    }
    Err(Error::InvalidArgument(format!(
        "size must look like 64x64, got {s:?}"
    )))
}

fn parse_fractions(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad fraction {p:?}")))
        })
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth {
            common,
            n,
            size,
            classes,
            noise,
        } => {
            let cfg = common.resolve()?;
            let size = match size {
                Some(s) => parse_size(&s)?,
                None => cfg.model.image_size,
            };
            commands::cmd_synth(&cfg, &common.out, n, size, classes, noise)
        }
        Cmd::Pretrain {
            common,
            manifest,
            modality,
        } => {
            let cfg = common.resolve()?;
            let modality = modality.as_deref().map(Modality::parse).transpose()?;
            commands::cmd_pretrain(&cfg, &manifest, &common.out, modality)
        }
        Cmd::FinetuneSeg {
            common,
            manifest,
            ckpt,
            policy,
            fraction,
            fold,
        } => {
            let cfg = common.resolve()?;
            let policy = parse_policy(&policy)?;
            if let Some(p) = policy {
                if p == TransferPolicy::Classify {
                    return Err(Error::InvalidArgument(
                        "segmentation finetuning accepts radiological-seg, color-seg, or scratch"
                            .into(),
                    ));
                }
            }
            commands::cmd_finetune_seg(
                &cfg,
                &manifest,
                ckpt.as_deref(),
                policy,
                fraction,
                FoldSel::parse(&fold)?,
                &common.out,
            )
        }
        Cmd::FinetuneCls {
            common,
            manifest,
            ckpt,
            policy,
            fraction,
            fold,
        } => {
            let cfg = common.resolve()?;
            commands::cmd_finetune_cls(
                &cfg,
                &manifest,
                ckpt.as_deref(),
                parse_policy(&policy)?,
                fraction,
                FoldSel::parse(&fold)?,
                &common.out,
            )
        }
        Cmd::Evaluate { common, task, a, b } => {
            let cfg = common.resolve()?;
            commands::cmd_evaluate(&cfg, &task, &a, &b, &common.out)
        }
        Cmd::EfficiencySweep {
            common,
            manifest,
            ckpt,
            policy,
            fractions,
            fold,
        } => {
            let cfg = common.resolve()?;
            commands::cmd_efficiency_sweep(
                &cfg,
                &manifest,
                ckpt.as_deref(),
                parse_policy(&policy)?,
                &parse_fractions(&fractions)?,
                fold,
                &common.out,
            )
        }
        Cmd::Inspect { ckpt } => commands::cmd_inspect(&ckpt),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_strings_parse() {
        assert_eq!(
            parse_policy("radiological-seg").unwrap(),
            Some(TransferPolicy::RadiologicalSeg)
        );
        assert_eq!(
            parse_policy("color-seg").unwrap(),
            Some(TransferPolicy::ColorSeg)
        );
        assert_eq!(
            parse_policy("classify").unwrap(),
            Some(TransferPolicy::Classify)
        );
        assert_eq!(parse_policy("scratch").unwrap(), None);
        assert!(parse_policy("other").is_err());
    }

    #[test]
    fn size_and_fraction_parsing() {
        assert_eq!(parse_size("64x64").unwrap(), (64, 64));
        assert!(parse_size("64").is_err());
        assert_eq!(parse_fractions("0.1,0.5").unwrap(), vec![0.1, 0.5]);
        assert!(parse_fractions("x").is_err());
    }
}
