//! Dataset construction: procedural texture patches, synthetic defect
//! injection with exact ground-truth masks, an MVTec-style directory
//! loader, and a binary dataset cache.

mod cache;
mod corrupt;
mod mvtec;
mod texture;

pub use cache::{load_dataset, save_dataset};
pub use corrupt::{corrupt, CorruptionSpec};
pub use mvtec::{contaminate_with_real, load_mvtec_layout, MvtecLayoutConfig};
pub use texture::{generate_texture_dataset, TextureParams};

use serde::{Deserialize, Serialize};

use crate::core::ImageTensor;
use crate::{Error, Result};

/// Whether a patch may be used for training or is held out for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// One dataset patch with pixel-exact anomaly ground truth.
#[derive(Clone, Debug)]
pub struct LabeledPatch {
    pub image: ImageTensor,
    /// Row-major H×W map, 1 where the pixel is anomalous.
    pub pixel_mask: Vec<u8>,
    /// True exactly when `pixel_mask` contains a 1.
    pub is_contaminated: bool,
    pub split: Split,
}

impl LabeledPatch {
    /// An anomaly-free patch: empty mask, not contaminated.
    pub fn normal(image: ImageTensor, split: Split) -> LabeledPatch {
        let (_, h, w) = image.shape();
        LabeledPatch { image, pixel_mask: vec![0; h * w], is_contaminated: false, split }
    }

    /// Number of anomalous pixels.
    pub fn mask_pixel_count(&self) -> usize {
        self.pixel_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Checks the structural invariants: mask length matches the spatial
    /// shape, mask values are binary, and the contamination flag agrees
    /// with the mask.
    pub fn validate(&self) -> Result<()> {
        let (_, h, w) = self.image.shape();
        if self.pixel_mask.len() != h * w {
            return Err(Error::invalid(format!(
                "mask length {} does not match {h}x{w} patch",
                self.pixel_mask.len()
            )));
        }
        if self.pixel_mask.iter().any(|&m| m > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        let any = self.pixel_mask.iter().any(|&m| m == 1);
        if any != self.is_contaminated {
            return Err(Error::invalid(format!(
                "contamination flag {} disagrees with mask ({} anomalous pixels)",
                self.is_contaminated,
                self.mask_pixel_count()
            )));
        }
        Ok(())
    }
}
