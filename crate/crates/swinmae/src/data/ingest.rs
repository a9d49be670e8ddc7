//! Image decoding, resizing, and normalization.

use std::path::Path;

use image::{DynamicImage, ImageReader};

use super::{DatasetManifest, ImageRecord, ManifestEntry};
use crate::error::{Error, Result};

/// Decode a raster file into (h, w, c, values scaled to [0,1]).
fn decode_image(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, data): (usize, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(b) => {
            (1, b.into_raw().iter().map(|&v| v as f32 / 255.0).collect())
        }
        DynamicImage::ImageLuma16(b) => (
            1,
            b.into_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        ),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().iter().map(|&v| v as f32 / 255.0).collect()),
        DynamicImage::ImageRgb16(b) => (
            3,
            b.into_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        ),
        other => {
            return Err(Error::ImageDecode {
                path: path.to_path_buf(),
                msg: format!("unsupported pixel layout {:?}", other.color()),
            })
        }
    };
    Ok((h, w, c, data))
}

/// Decode a single-channel mask; raw integer values are class indices.
fn decode_mask(path: &Path) -> Result<(usize, usize, Vec<u32>)> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<u32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().iter().map(|&v| v as u32).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().iter().map(|&v| v as u32).collect(),
        other => {
            return Err(Error::ImageDecode {
                path: path.to_path_buf(),
                msg: format!("mask must be single-channel, got {:?}", other.color()),
            })
        }
    };
    Ok((h, w, data))
}

/// Bilinear resample with pixel-center alignment; the identity when sizes
/// already match.
pub fn bilinear_resize(
    src: &[f32],
    (h, w, c): (usize, usize, usize),
    (th, tw): (usize, usize),
) -> Vec<f32> {
    if (h, w) == (th, tw) {
        return src.to_vec();
    }
    let mut out = vec![0.0f32; th * tw * c];
    let sy_scale = h as f64 / th as f64;
    let sx_scale = w as f64 / tw as f64;
    for y in 0..th {
        let sy = ((y as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64) as f32;
        for x in 0..tw {
            let sx = ((x as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64) as f32;
            for ch in 0..c {
                let p00 = src[(y0 * w + x0) * c + ch];
                let p01 = src[(y0 * w + x1) * c + ch];
                let p10 = src[(y1 * w + x0) * c + ch];
                let p11 = src[(y1 * w + x1) * c + ch];
                let top = p00 + (p01 - p00) * fx;
                let bot = p10 + (p11 - p10) * fx;
                out[(y * tw + x) * c + ch] = top + (bot - top) * fy;
            }
        }
    }
    out
}

/// Nearest-neighbor resample for integer masks (label integrality preserved).
pub fn nearest_resize_mask(
    src: &[u32],
    (h, w): (usize, usize),
    (th, tw): (usize, usize),
) -> Vec<u32> {
    if (h, w) == (th, tw) {
        return src.to_vec();
    }
    let mut out = vec![0u32; th * tw];
    for y in 0..th {
        let sy = (((y as f64 + 0.5) * h as f64 / th as f64 - 0.5).round() as i64)
            .clamp(0, h as i64 - 1) as usize;
        for x in 0..tw {
            let sx = (((x as f64 + 0.5) * w as f64 / tw as f64 - 0.5).round() as i64)
                .clamp(0, w as i64 - 1) as usize;
            out[y * tw + x] = src[sy * w + sx];
        }
    }
    out
}

/// Per-image min-max normalization to [0,1]; constant images map to zeros.
fn min_max_normalize(pixels: &mut [f32]) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in pixels.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        let scale = 1.0 / (hi - lo);
        for v in pixels.iter_mut() {
            *v = ((*v - lo) * scale).clamp(0.0, 1.0);
        }
    } else {
        pixels.fill(0.0);
    }
}

/// Load one manifest entry: decode, bilinear-resize to `target_size`,
/// min-max normalize; the mask (if any) is nearest-neighbor resized.
pub fn ingest_image(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    target_size: (usize, usize),
) -> Result<ImageRecord> {
    let img_path = manifest.resolve(&entry.path);
    let (h, w, c, raw) = decode_image(&img_path)?;

    let mask = match &entry.mask_path {
        Some(mp) => {
            let (mh, mw, m) = decode_mask(&manifest.resolve(mp))?;
            if (mh, mw) != (h, w) {
                return Err(Error::MaskDimensionMismatch {
                    id: entry.id.clone(),
                    mask: (mh, mw),
                    image: (h, w),
                });
            }
            Some(nearest_resize_mask(&m, (mh, mw), target_size))
        }
        None => None,
    };

    let mut pixels = bilinear_resize(&raw, (h, w, c), target_size);
    min_max_normalize(&mut pixels);

    ImageRecord::new(
        entry.id.clone(),
        entry.modality,
        target_size.0,
        target_size.1,
        c,
        pixels,
        entry.class_label,
        mask,
    )
}


#[cfg(test)]
mod file_tests {
    use super::*;
    use crate::data::{DatasetManifest, ManifestEntry, Modality};
    use std::path::PathBuf;

    fn setup(dir_name: &str) -> (PathBuf, DatasetManifest) {
        let dir =
            std::env::temp_dir().join(format!("swinmae-ingest-{}-{dir_name}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let manifest = DatasetManifest {
            entries: vec![],
            class_count: 0,
            target_size: None,
            policy: None,
            root: dir.clone(),
        };
        (dir, manifest)
    }

    fn gray_png(dir: &std::path::Path, name: &str, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
        let img = image::GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)]));
        img.save(dir.join(name)).unwrap();
    }

    #[test]
    fn ingest_decodes_resizes_and_normalizes() {
        let (dir, manifest) = setup("basic");
        gray_png(&dir, "a.png", 8, 8, |x, y| ((x + y) * 17) as u8);
        let entry = ManifestEntry {
            id: "a".into(),
            path: "a.png".into(),
            modality: Modality::Mr,
            class_label: None,
            mask_path: None,
        };
        let rec = ingest_image(&manifest, &entry, (4, 4)).unwrap();
        assert_eq!(rec.dims(), (4, 4, 1));
        let lo = rec.pixels.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = rec.pixels.iter().cloned().fold(0.0f32, f32::max);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn mask_size_mismatch_is_reported_before_resizing() {
        let (dir, manifest) = setup("mismatch");
        gray_png(&dir, "img.png", 8, 8, |_, _| 100);
        gray_png(&dir, "mask.png", 6, 6, |_, _| 1);
        let entry = ManifestEntry {
            id: "m".into(),
            path: "img.png".into(),
            modality: Modality::Mr,
            class_label: None,
            mask_path: Some("mask.png".into()),
        };
        match ingest_image(&manifest, &entry, (8, 8)) {
            Err(crate::error::Error::MaskDimensionMismatch { mask, image, .. }) => {
                assert_eq!(mask, (6, 6));
                assert_eq!(image, (8, 8));
            }
            other => panic!("expected mask mismatch, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn undecodable_file_is_an_error() {
        let (dir, manifest) = setup("baddata");
        std::fs::write(dir.join("junk.png"), b"not a png at all").unwrap();
        let entry = ManifestEntry {
            id: "j".into(),
            path: "junk.png".into(),
            modality: Modality::Us,
            class_label: None,
            mask_path: None,
        };
        assert!(matches!(
            ingest_image(&manifest, &entry, (8, 8)),
            Err(crate::error::Error::ImageDecode { .. })
        ));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn ingest_is_idempotent_on_normalized_sized_input() {
        // A full-range image at the target size survives a second pass
        // through resize + normalize untouched.
        let (dir, manifest) = setup("idem");
        gray_png(&dir, "a.png", 8, 8, |x, y| {
            if (x, y) == (0, 0) {
                0
            } else if (x, y) == (7, 7) {
                255
            } else {
                ((x * 31 + y * 7) % 251) as u8
            }
        });
        let entry = ManifestEntry {
            id: "a".into(),
            path: "a.png".into(),
            modality: Modality::Xray,
            class_label: None,
            mask_path: None,
        };
        let rec = ingest_image(&manifest, &entry, (8, 8)).unwrap();
        let twice = {
            let mut px = bilinear_resize(&rec.pixels, (8, 8, 1), (8, 8));
            super::min_max_normalize(&mut px);
            px
        };
        assert_eq!(rec.pixels, twice);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
