//! Run configuration: profile defaults, config-file overrides, and the
//! effective configuration echoed into every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::optim::ScheduleConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Toy,
    Paper,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::InvalidArgument(format!("unknown profile {other:?}"))),
        }
    }

    pub fn model(&self) -> ModelConfig {
        match self {
            Profile::Toy => ModelConfig::toy(),
            Profile::Paper => ModelConfig::paper(),
        }
    }
}

/// One training phase: schedule plus batch size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    #[serde(flatten)]
    pub sched: ScheduleConfig,
    pub batch_size: usize,
}

fn phase(base_lr: f64, warmup: usize, total: usize, batch: usize) -> PhaseConfig {
    PhaseConfig {
        sched: ScheduleConfig::new(base_lr, warmup, total),
        batch_size: batch,
    }
}

/// Fully resolved configuration; embedded verbatim in artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveConfig {
    pub profile: Profile,
    pub seed: u64,
    pub model: ModelConfig,
    pub pretrain: PhaseConfig,
    pub seg: PhaseConfig,
    pub cls: PhaseConfig,
    pub w_dice: f64,
    pub w_ce: f64,
}

impl EffectiveConfig {
    pub fn defaults(profile: Profile, seed: u64) -> Self {
        let (pretrain, seg, cls) = match profile {
            // Full-scale settings: pretraining at lr 1e-4 over 800 epochs
            // with a 10-epoch warmup and batch 640; segmentation 40/150;
            // classification lr 1e-3, 10/50.
            Profile::Paper => (
                phase(1e-4, 10, 800, 640),
                phase(1e-4, 40, 150, 16),
                phase(1e-3, 10, 50, 16),
            ),
            // Minutes-scale defaults.
            Profile::Toy => (
                phase(1e-3, 10, 50, 16),
                phase(1e-3, 3, 30, 16),
                phase(1e-3, 3, 30, 16),
            ),
        };
        EffectiveConfig {
            profile,
            seed,
            model: profile.model(),
            pretrain,
            seg,
            cls,
            w_dice: 0.5,
            w_ce: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.sched.validate()?;
        self.seg.sched.validate()?;
        self.cls.sched.validate()?;
        if self.w_dice < 0.0 || self.w_ce < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Single-line JSON used as the config echo in artifacts.
    pub fn echo(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub image_size: Option<(usize, usize)>,
    pub in_channels: Option<usize>,
    pub patch: Option<usize>,
    pub embed_dim: Option<usize>,
    pub enc_depths: Option<Vec<usize>>,
    pub enc_heads: Option<Vec<usize>>,
    pub dec_depths: Option<Vec<usize>>,
    pub window: Option<usize>,
    pub mlp_ratio: Option<f64>,
    pub mask_ratio: Option<f64>,
    pub patch_norm_target: Option<bool>,
    pub masked_loss_only: Option<bool>,
    pub use_rel_bias: Option<bool>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseOverrides {
    pub base_lr: Option<f64>,
    pub warmup_epochs: Option<usize>,
    pub total_epochs: Option<usize>,
    pub weight_decay: Option<f64>,
    pub betas: Option<(f64, f64)>,
    pub eps: Option<f64>,
    pub batch_size: Option<usize>,
}

/// On-disk run configuration; unknown keys are rejected.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub profile: Option<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub pretrain: PhaseOverrides,
    #[serde(default)]
    pub seg: PhaseOverrides,
    #[serde(default)]
    pub cls: PhaseOverrides,
    pub w_dice: Option<f64>,
    pub w_ce: Option<f64>,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn apply_phase(dst: &mut PhaseConfig, src: &PhaseOverrides) {
    if let Some(v) = src.base_lr {
        dst.sched.base_lr = v;
    }
    if let Some(v) = src.warmup_epochs {
        dst.sched.warmup_epochs = v;
    }
    if let Some(v) = src.total_epochs {
        dst.sched.total_epochs = v;
    }
    if let Some(v) = src.weight_decay {
        dst.sched.weight_decay = v;
    }
    if let Some(v) = src.betas {
        dst.sched.betas = v;
    }
    if let Some(v) = src.eps {
        dst.sched.eps = v;
    }
    if let Some(v) = src.batch_size {
        dst.batch_size = v;
    }
}

/// Resolve precedence: profile defaults, then the config file, then CLI
/// flags (handled by the caller).
pub fn resolve(
    file: &RunConfigFile,
    flag_profile: Option<&str>,
    flag_seed: Option<u64>,
) -> Result<EffectiveConfig> {
    let profile = match flag_profile {
        Some(p) => Profile::parse(p)?,
        None => match &file.profile {
            Some(p) => Profile::parse(p)?,
            None => Profile::Toy,
        },
    };
    let seed = flag_seed.or(file.seed).unwrap_or(0);
    let mut cfg = EffectiveConfig::defaults(profile, seed);

    let m = &file.model;
    if let Some(v) = m.image_size {
        cfg.model.image_size = v;
    }
    if let Some(v) = m.in_channels {
        cfg.model.in_channels = v;
    }
    if let Some(v) = m.patch {
        cfg.model.patch = v;
    }
    if let Some(v) = m.embed_dim {
        cfg.model.embed_dim = v;
    }
    if let Some(v) = &m.enc_depths {
        cfg.model.enc_depths = v.clone();
    }
    if let Some(v) = &m.enc_heads {
        cfg.model.enc_heads = v.clone();
    }
    if let Some(v) = &m.dec_depths {
        cfg.model.dec_depths = v.clone();
    }
    if let Some(v) = m.window {
        cfg.model.window = v;
    }
    if let Some(v) = m.mlp_ratio {
        cfg.model.mlp_ratio = v;
    }
    if let Some(v) = m.mask_ratio {
        cfg.model.mask_ratio = v;
    }
    if let Some(v) = m.patch_norm_target {
        cfg.model.patch_norm_target = v;
    }
    if let Some(v) = m.masked_loss_only {
        cfg.model.masked_loss_only = v;
    }
    if let Some(v) = m.use_rel_bias {
        cfg.model.use_rel_bias = v;
    }
    apply_phase(&mut cfg.pretrain, &file.pretrain);
    apply_phase(&mut cfg.seg, &file.seg);
    apply_phase(&mut cfg.cls, &file.cls);
    if let Some(v) = file.w_dice {
        cfg.w_dice = v;
    }
    if let Some(v) = file.w_ce {
        cfg.w_ce = v;
    }
    cfg.validate()?;
    Ok(cfg)
}
