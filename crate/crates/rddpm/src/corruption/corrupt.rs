//! Synthetic defect injection: brighten aligned 2×2 pixel blocks inside a
//! chosen fraction of patches, recording exact per-pixel ground truth.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::LabeledPatch;
use crate::core::RngState;
use crate::{Error, Result};

/// How a dataset is contaminated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Fraction of patches to corrupt, in [0, 1].
    pub contamination_ratio: f64,
    /// Fraction of each corrupted patch's 2×2 blocks to alter, in (0, 1].
    #[serde(default = "default_block_fraction")]
    pub block_fraction: f64,
    /// Intensity multiplier applied in offset space, > 1.
    #[serde(default = "default_intensity_factor")]
    pub intensity_factor: f64,
    /// Seed of the corruption stream (the CLI derives the stream passed to
    /// [`corrupt`] from this value).
    #[serde(default)]
    pub seed: u64,
}

fn default_block_fraction() -> f64 {
    0.7
}

fn default_intensity_factor() -> f64 {
    5.0
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            contamination_ratio: 0.2,
            block_fraction: default_block_fraction(),
            intensity_factor: default_intensity_factor(),
            seed: 0,
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.contamination_ratio) {
            return Err(Error::invalid(format!(
                "contamination ratio must lie in [0, 1], got {}",
                self.contamination_ratio
            )));
        }
        if !(self.block_fraction > 0.0 && self.block_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "block fraction must lie in (0, 1], got {}",
                self.block_fraction
            )));
        }
        if !(self.intensity_factor > 1.0 && self.intensity_factor.is_finite()) {
            return Err(Error::invalid(format!(
                "intensity factor must exceed 1, got {}",
                self.intensity_factor
            )));
        }
        Ok(())
    }
}

/// Corrupts exactly `round(contamination_ratio·n)` of the input patches.
///
/// Within each corrupted patch the image is partitioned into non-overlapping
/// aligned 2×2 blocks (196 for a 28×28 patch) and exactly
/// `round(block_fraction·blocks)` of them are chosen uniformly. Chosen
/// pixels are brightened in offset space — v' = clamp((v+1)·factor − 1) —
/// because multiplying signed values directly would flip the meaning of
/// dark pixels; the offset form emulates an overexposure artifact on a
/// nonnegative intensity scale. Every value strictly below the upper clamp
/// moves, so for in-range inputs the altered-pixel set is exactly the
/// chosen-block area.
///
/// The output mask marks exactly the pixels whose stored value changed
/// (OR-ed with any preexisting mask), so `pixel_mask` can be trusted as
/// bit-level ground truth; pixels outside chosen blocks are bit-identical
/// to the input. Patch selection consumes `rng`; per-patch block choices
/// come from `rng.split_indexed("blocks", patch_index)`, keeping the
/// result independent of thread count.
pub fn corrupt(
    patches: &[LabeledPatch],
    spec: &CorruptionSpec,
    rng: &mut RngState,
) -> Result<Vec<LabeledPatch>> {
    spec.validate()?;
    for (i, p) in patches.iter().enumerate() {
        let (_, h, w) = p.image.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!(
                "patch {i} is {h}x{w}; 2x2 block corruption needs even sides"
            )));
        }
    }

    let n = patches.len();
    let n_corrupt = (spec.contamination_ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut chosen = vec![false; n];
    for &i in order.iter().take(n_corrupt) {
        chosen[i] = true;
    }

    let rng: &RngState = rng;
    patches
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            if chosen[i] {
                corrupt_one(p, spec, &mut rng.split_indexed("blocks", i as u64))
            } else {
                Ok(p.clone())
            }
        })
        .collect()
}

fn corrupt_one(
    patch: &LabeledPatch,
    spec: &CorruptionSpec,
    rng: &mut RngState,
) -> Result<LabeledPatch> {
    let (c, h, w) = patch.image.shape();
    let blocks_y = h / 2;
    let blocks_x = w / 2;
    let n_blocks = blocks_y * blocks_x;
    let n_altered = (spec.block_fraction * n_blocks as f64).round() as usize;

    let mut block_order: Vec<usize> = (0..n_blocks).collect();
    rng.shuffle(&mut block_order);

    let mut image = patch.image.clone();
    for &b in block_order.iter().take(n_altered) {
        let y0 = (b / blocks_x) * 2;
        let x0 = (b % blocks_x) * 2;
        for dy in 0..2 {
            for dx in 0..2 {
                for ch in 0..c {
                    let v = f64::from(image.get(ch, y0 + dy, x0 + dx));
                    let bright = ((v + 1.0) * spec.intensity_factor - 1.0).clamp(-1.0, 1.0);
                    image.set(ch, y0 + dy, x0 + dx, bright as f32);
                }
            }
        }
    }

    // Ground truth by exact diff: a pixel is anomalous iff some channel's
    // stored value changed.
    let mut pixel_mask = patch.pixel_mask.clone();
    for y in 0..h {
        for x in 0..w {
            let changed = (0..c).any(|ch| {
                image.get(ch, y, x).to_bits() != patch.image.get(ch, y, x).to_bits()
            });
            if changed {
                pixel_mask[y * w + x] = 1;
            }
        }
    }
    let is_contaminated = pixel_mask.iter().any(|&m| m == 1);
    Ok(LabeledPatch { image, pixel_mask, is_contaminated, split: patch.split })
}
