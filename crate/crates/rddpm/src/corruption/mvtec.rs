//! Loader for datasets laid out like MVTec AD:
//!
//! ```text
//! <class>/train/good/*.png
//! <class>/test/<defect>/*.png        (defect = "good" has no masks)
//! <class>/ground_truth/<defect>/*_mask.png
//! ```
//!
//! Images are resized to a square working resolution with bilinear
//! interpolation (masks with nearest-neighbor, keeping them binary) and cut
//! into non-overlapping square patches; partial border patches are
//! discarded (floor tiling). Training patches only ever come from
//! `train/good`, so the train split contains no labeled defects unless
//! [`contaminate_with_real`] explicitly mixes some in.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use super::{LabeledPatch, Split};
use crate::core::{ImageTensor, RngState};
use crate::{Error, Result};

/// Working resolution and patch geometry for the directory loader.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvtecLayoutConfig {
    /// Square side every image is resized to before tiling.
    #[serde(default = "default_resolution")]
    pub resolution: u32,
    /// Side of the square patches cut from the resized image.
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    /// Convert images to single-channel luma (the texture pipeline's
    /// format). Set false to keep RGB.
    #[serde(default = "default_grayscale")]
    pub grayscale: bool,
}

fn default_resolution() -> u32 {
    112
}
fn default_patch_size() -> usize {
    28
}
fn default_grayscale() -> bool {
    true
}

impl Default for MvtecLayoutConfig {
    fn default() -> Self {
        MvtecLayoutConfig {
            resolution: default_resolution(),
            patch_size: default_patch_size(),
            grayscale: default_grayscale(),
        }
    }
}

impl MvtecLayoutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 2 {
            return Err(Error::invalid("patch size must be at least 2"));
        }
        if (self.resolution as usize) < self.patch_size {
            return Err(Error::invalid(format!(
                "resolution {} is smaller than patch size {}",
                self.resolution, self.patch_size
            )));
        }
        Ok(())
    }
}

/// Loads one class directory in the layout above.
///
/// `train/good` images become [`Split::Train`] patches with empty masks;
/// everything under `test/` becomes [`Split::Eval`] patches, with
/// ground-truth masks cropped in lockstep for defective images
/// (`<stem>_mask.png` or `<stem>.png` under `ground_truth/<defect>/`).
/// A defective test image without a mask file is an error. Files are
/// visited in sorted order, so the result is deterministic.
pub fn load_mvtec_layout(
    class_dir: &Path,
    config: &MvtecLayoutConfig,
) -> Result<Vec<LabeledPatch>> {
    config.validate()?;
    let res = config.resolution as usize;
    let mut patches = Vec::new();

    let train_good = class_dir.join("train").join("good");
    for path in sorted_pngs(&train_good)? {
        let image = load_resized(&path, config)?;
        tile_into(&image, &vec![0u8; res * res], config.patch_size, Split::Train, &mut patches);
    }

    let test_dir = class_dir.join("test");
    if test_dir.is_dir() {
        for defect_dir in sorted_subdirs(&test_dir)? {
            let defect = defect_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            for path in sorted_pngs(&defect_dir)? {
                let image = load_resized(&path, config)?;
                let mask = if defect == "good" {
                    vec![0u8; res * res]
                } else {
                    load_mask_resized(class_dir, &defect, &path, config)?
                };
                tile_into(&image, &mask, config.patch_size, Split::Eval, &mut patches);
            }
        }
    }

    if patches.is_empty() {
        return Err(Error::invalid(format!(
            "no patches found under {}",
            class_dir.display()
        )));
    }
    Ok(patches)
}

/// Mixes real defective patches into a clean training set so that the
/// defective fraction of the result is `ratio`.
///
/// Adds k = round(ratio·n/(1−ratio)) contaminated patches drawn without
/// replacement from `pool` (entries with empty masks are ignored), retagged
/// [`Split::Train`] and appended after the clean patches. Errors if the
/// pool has fewer than k contaminated patches.
pub fn contaminate_with_real(
    clean_train: &[LabeledPatch],
    pool: &[LabeledPatch],
    ratio: f64,
    rng: &mut RngState,
) -> Result<Vec<LabeledPatch>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!(
            "real-contamination ratio must lie in [0, 1), got {ratio}"
        )));
    }
    let n = clean_train.len();
    let k = (ratio * n as f64 / (1.0 - ratio)).round() as usize;

    let defective: Vec<usize> =
        (0..pool.len()).filter(|&i| pool[i].is_contaminated).collect();
    if defective.len() < k {
        return Err(Error::invalid(format!(
            "need {k} defective patches to reach ratio {ratio}, pool has {}",
            defective.len()
        )));
    }

    let mut order = defective;
    rng.shuffle(&mut order);
    let mut out = clean_train.to_vec();
    for &i in order.iter().take(k) {
        let mut patch = pool[i].clone();
        patch.split = Split::Train;
        out.push(patch);
    }
    Ok(out)
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .map(|e| e.to_string_lossy().eq_ignore_ascii_case("png"))
            .unwrap_or(false);
        if path.is_file() && is_png {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn load_resized(path: &Path, config: &MvtecLayoutConfig) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
    let resized = img.resize_exact(config.resolution, config.resolution, FilterType::Triangle);
    Ok(if config.grayscale {
        crate::core::gray_to_tensor(&resized.to_luma8())
    } else {
        crate::core::dynimage_to_tensor(&resized)
    })
}

fn load_mask_resized(
    class_dir: &Path,
    defect: &str,
    image_path: &Path,
    config: &MvtecLayoutConfig,
) -> Result<Vec<u8>> {
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let gt_dir = class_dir.join("ground_truth").join(defect);
    let candidates = [gt_dir.join(format!("{stem}_mask.png")), gt_dir.join(format!("{stem}.png"))];
    let mask_path = candidates.iter().find(|p| p.is_file()).ok_or_else(|| Error::Format {
        path: image_path.to_path_buf(),
        message: format!(
            "defective image has no ground-truth mask (looked for {} and {})",
            candidates[0].display(),
            candidates[1].display()
        ),
    })?;

    let img = image::open(mask_path)
        .map_err(|e| Error::Image { path: mask_path.clone(), message: e.to_string() })?;
    let resized = image::DynamicImage::ImageLuma8(img.to_luma8()).resize_exact(
        config.resolution,
        config.resolution,
        FilterType::Nearest,
    );
    Ok(resized.to_luma8().pixels().map(|p| u8::from(p.0[0] >= 128)).collect())
}

/// Cuts a resized image and its mask into non-overlapping patches,
/// discarding any partial border remainder.
fn tile_into(
    image: &ImageTensor,
    mask: &[u8],
    patch_size: usize,
    split: Split,
    out: &mut Vec<LabeledPatch>,
) {
    let (c, h, w) = image.shape();
    let ny = h / patch_size;
    let nx = w / patch_size;
    for py in 0..ny {
        for px in 0..nx {
            let y0 = py * patch_size;
            let x0 = px * patch_size;
            let mut data = Vec::with_capacity(c * patch_size * patch_size);
            for ch in 0..c {
                for dy in 0..patch_size {
                    for dx in 0..patch_size {
                        data.push(image.get(ch, y0 + dy, x0 + dx));
                    }
                }
            }
            let mut patch_mask = Vec::with_capacity(patch_size * patch_size);
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    patch_mask.push(mask[(y0 + dy) * w + x0 + dx]);
                }
            }
            let is_contaminated = patch_mask.iter().any(|&m| m == 1);
            out.push(LabeledPatch {
                image: ImageTensor::from_data(c, patch_size, patch_size, data)
                    .expect("patch dimensions are consistent"),
                pixel_mask: patch_mask,
                is_contaminated,
                split,
            });
        }
    }
}
