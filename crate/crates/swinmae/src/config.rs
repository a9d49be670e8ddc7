//! Architecture configuration, profiles, validation, and the shape ledger.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Resolved per-stage layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// Effective window after clamping to the stage grid.
    pub window: usize,
    /// Cyclic shift used by odd-indexed blocks; 0 when a single window covers
    /// the grid.
    pub shift: usize,
    pub grid: (usize, usize),
}

/// Architecture hyperparameters shared by the autoencoder and both
/// downstream models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: (usize, usize),
    pub in_channels: usize,
    /// Patch side in pixels.
    pub patch: usize,
    /// Channel width after patch embedding; stage i runs at embed_dim * 2^i.
    pub embed_dim: usize,
    pub enc_depths: Vec<usize>,
    pub enc_heads: Vec<usize>,
    /// Reconstruction decoder depths, shallowest last; one fewer stage than
    /// the encoder.
    pub dec_depths: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: f64,
    pub mask_ratio: f64,
    /// Standardize reconstruction targets per patch.
    pub patch_norm_target: bool,
    /// Reconstruction loss restricted to masked positions.
    pub masked_loss_only: bool,
    pub use_rel_bias: bool,
}

impl ModelConfig {
    /// 64x64 profile sized for minutes-scale runs; the default for tests.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: (64, 64),
            in_channels: 1,
            patch: 4,
            embed_dim: 32,
            enc_depths: vec![2, 2, 2, 2],
            enc_heads: vec![2, 4, 8, 8],
            dec_depths: vec![2, 2, 2],
            window: 4,
            mlp_ratio: 4.0,
            mask_ratio: 0.75,
            patch_norm_target: false,
            masked_loss_only: true,
            use_rel_bias: true,
        }
    }

    /// Full-scale profile: 224x224 inputs, Swin-T widths.
    pub fn paper() -> Self {
        ModelConfig {
            image_size: (224, 224),
            in_channels: 1,
            patch: 4,
            embed_dim: 96,
            enc_depths: vec![2, 2, 2, 2],
            enc_heads: vec![3, 6, 12, 24],
            dec_depths: vec![2, 2, 2],
            window: 7,
            mlp_ratio: 4.0,
            mask_ratio: 0.75,
            patch_norm_target: false,
            masked_loss_only: true,
            use_rel_bias: true,
        }
    }

    /// Downstream variant of this config: the third encoder stage deepens to
    /// 6 blocks, everything else unchanged.
    pub fn downstream(&self) -> Self {
        let mut cfg = self.clone();
        if cfg.enc_depths.len() >= 3 {
            cfg.enc_depths[2] = 6;
        }
        cfg
    }

    /// Token grid of the patchified image.
    pub fn token_grid(&self) -> (usize, usize) {
        (
            self.image_size.0 / self.patch,
            self.image_size.1 / self.patch,
        )
    }

    /// Patch vector length before embedding.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.in_channels
    }

    fn stage_at(
        &self,
        grid: (usize, usize),
        dim: usize,
        depth: usize,
        heads: usize,
    ) -> StageConfig {
        let window = self.window.min(grid.0).min(grid.1);
        // A window covering the whole grid leaves nothing to shift across.
        let shift = if window < grid.0 || window < grid.1 {
            window / 2
        } else {
            0
        };
        StageConfig {
            depth,
            dim,
            heads,
            window,
            shift,
            grid,
        }
    }

    /// Resolved encoder stages, shallow to deep. Stage 0 follows the patch
    /// embedding; stages 1.. begin with a patch merge.
    pub fn enc_stages(&self) -> Vec<StageConfig> {
        let (mut gh, mut gw) = self.token_grid();
        let mut dim = self.embed_dim;
        let mut out = Vec::with_capacity(self.enc_depths.len());
        for (i, (&depth, &heads)) in self.enc_depths.iter().zip(&self.enc_heads).enumerate() {
            if i > 0 {
                gh /= 2;
                gw /= 2;
                dim *= 2;
            }
            out.push(self.stage_at((gh, gw), dim, depth, heads));
        }
        out
    }

    /// Resolved reconstruction-decoder stages, deep to shallow. Each begins
    /// with a patch expand; the last runs at the full token grid.
    pub fn dec_stages(&self) -> Vec<StageConfig> {
        let enc = self.enc_stages();
        let mut out = Vec::with_capacity(self.dec_depths.len());
        for (i, &depth) in self.dec_depths.iter().enumerate() {
            // Decoder stage i mirrors encoder stage (S-2-i).
            let mirror = &enc[enc.len() - 2 - i];
            out.push(self.stage_at(mirror.grid, mirror.dim, depth, mirror.heads));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::Config("image size must be nonzero".into()));
        }
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} not divisible by patch {}",
                self.patch
            )));
        }
        if self.enc_depths.is_empty() || self.enc_depths.len() != self.enc_heads.len() {
            return Err(Error::Config(
                "enc_depths and enc_heads must be non-empty and equal length".into(),
            ));
        }
        if self.dec_depths.len() + 1 != self.enc_depths.len() {
            return Err(Error::Config(format!(
                "decoder must have one stage fewer than the encoder ({} vs {})",
                self.dec_depths.len(),
                self.enc_depths.len()
            )));
        }
        if self.window < 2 {
            return Err(Error::Config("window must be at least 2".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config("mask_ratio must lie in (0, 1)".into()));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        let (gh, gw) = self.token_grid();
        let halvings = self.enc_depths.len() - 1;
        if gh % (1 << halvings) != 0 || gw % (1 << halvings) != 0 {
            return Err(Error::Config(format!(
                "token grid {gh}x{gw} cannot halve {halvings} times"
            )));
        }
        for (i, st) in self.enc_stages().iter().enumerate() {
            if st.dim % st.heads != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: dim {} not divisible by heads {}",
                    st.dim, st.heads
                )));
            }
            if st.grid.0 % st.window != 0 || st.grid.1 % st.window != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: grid {:?} not divisible by window {}",
                    st.grid, st.window
                )));
            }
        }
        Ok(())
    }
}

/// Grid/width entries predicted by config arithmetic, used to pin the
/// stage-by-stage shapes of every model built from a config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub grid: (usize, usize),
    pub dim: usize,
}

pub fn encoder_ledger(cfg: &ModelConfig) -> Vec<StageShape> {
    cfg.enc_stages()
        .iter()
        .map(|s| StageShape {
            grid: s.grid,
            dim: s.dim,
        })
        .collect()
}

pub fn decoder_ledger(cfg: &ModelConfig) -> Vec<StageShape> {
    cfg.dec_stages()
        .iter()
        .map(|s| StageShape {
            grid: s.grid,
            dim: s.dim,
        })
        .collect()
}
