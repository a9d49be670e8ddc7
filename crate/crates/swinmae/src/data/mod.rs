//! Dataset ingestion: manifests, image loading, split policies, and the
//! synthetic corpus generator.

mod ingest;
mod manifest;
mod splits;
mod synth;

pub use ingest::{bilinear_resize, ingest_image, nearest_resize_mask};
pub use manifest::{load_manifest, DatasetManifest, ManifestEntry, ManifestMeta};
pub use splits::{make_splits, subset_fraction, Fold, SplitAssignment, SplitPolicy};
pub use synth::{synth_corpus, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "MR")]
    Mr,
    #[serde(rename = "CT_PET")]
    CtPet,
    #[serde(rename = "US")]
    Us,
    #[serde(rename = "XRAY")]
    Xray,
    #[serde(rename = "COLOR")]
    Color,
    #[serde(rename = "SYNTH")]
    Synth,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Mr => "MR",
            Modality::CtPet => "CT_PET",
            Modality::Us => "US",
            Modality::Xray => "XRAY",
            Modality::Color => "COLOR",
            Modality::Synth => "SYNTH",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "MR" => Ok(Modality::Mr),
            "CT_PET" => Ok(Modality::CtPet),
            "US" => Ok(Modality::Us),
            "XRAY" => Ok(Modality::Xray),
            "COLOR" => Ok(Modality::Color),
            "SYNTH" => Ok(Modality::Synth),
            other => Err(Error::InvalidArgument(format!(
                "unknown modality {other:?}"
            ))),
        }
    }
}

/// A normalized image plus optional labels; the unit of ingestion.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub modality: Modality,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// H x W x c, row-major, values in [0, 1].
    pub pixels: Vec<f32>,
    pub class_label: Option<usize>,
    /// H x W class indices; 0 is background.
    pub seg_mask: Option<Vec<u32>>,
}

impl ImageRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: String,
        modality: Modality,
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f32>,
        class_label: Option<usize>,
        seg_mask: Option<Vec<u32>>,
    ) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::InvalidArgument(format!(
                "pixel buffer length {} inconsistent with {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {bad} outside [0, 1] in record {id:?}"
            )));
        }
        if let Some(mask) = &seg_mask {
            if mask.len() != height * width {
                return Err(Error::MaskDimensionMismatch {
                    id,
                    mask: (mask.len(), 0),
                    image: (height, width),
                });
            }
        }
        Ok(ImageRecord {
            id,
            modality,
            height,
            width,
            channels,
            pixels,
            class_label,
            seg_mask,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}
