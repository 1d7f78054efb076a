//! Side-by-side review panels: input, reconstruction, and heatmap pasted
//! into one PNG so a run's qualitative behavior can be skimmed quickly.

use std::path::Path;

use image::RgbImage;

use crate::core::{unit_to_byte, ImageTensor};
use crate::segmentation::Heatmap;
use crate::{Error, Result};

const GAP: usize = 2;
const GAP_GRAY: [u8; 3] = [128, 128, 128];

/// Composites `input | reconstruction | heatmap` horizontally with thin
/// separators. The two images use the normal byte mapping; the heatmap is
/// min-max normalized and tinted with a dark-to-bright heat ramp so small
/// scores stay visible next to the grayscale images.
pub(crate) fn composite_panel(
    input: &ImageTensor,
    reconstruction: &ImageTensor,
    heatmap: &Heatmap,
) -> Result<RgbImage> {
    let (c, h, w) = input.shape();
    if reconstruction.shape() != (c, h, w) {
        return Err(Error::invalid(format!(
            "reconstruction shape {:?} does not match input {:?}",
            reconstruction.shape(),
            (c, h, w)
        )));
    }
    if (heatmap.height(), heatmap.width()) != (h, w) {
        return Err(Error::invalid(format!(
            "heatmap {}x{} does not match the {h}x{w} input",
            heatmap.height(),
            heatmap.width()
        )));
    }
    if !(c == 1 || c == 3) {
        return Err(Error::invalid(format!("panels need 1- or 3-channel images, got {c}")));
    }

    let full_w = 3 * w + 2 * GAP;
    let mut out = RgbImage::from_pixel(full_w as u32, h as u32, image::Rgb(GAP_GRAY));
    paste_tensor(&mut out, input, 0);
    paste_tensor(&mut out, reconstruction, w + GAP);
    paste_heatmap(&mut out, heatmap, 2 * (w + GAP));
    Ok(out)
}

/// Writes the composite for one evaluated image.
pub(crate) fn save_panel(
    path: &Path,
    input: &ImageTensor,
    reconstruction: &ImageTensor,
    heatmap: &Heatmap,
) -> Result<()> {
    let panel = composite_panel(input, reconstruction, heatmap)?;
    panel
        .save(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

fn paste_tensor(out: &mut RgbImage, tensor: &ImageTensor, x_off: usize) {
    let (c, h, w) = tensor.shape();
    for y in 0..h {
        for x in 0..w {
            let px = if c == 1 {
                let g = unit_to_byte(tensor.get(0, y, x));
                [g, g, g]
            } else {
                [
                    unit_to_byte(tensor.get(0, y, x)),
                    unit_to_byte(tensor.get(1, y, x)),
                    unit_to_byte(tensor.get(2, y, x)),
                ]
            };
            out.put_pixel((x_off + x) as u32, y as u32, image::Rgb(px));
        }
    }
}

fn paste_heatmap(out: &mut RgbImage, heatmap: &Heatmap, x_off: usize) {
    let scores = heatmap.scores();
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &s in scores {
        lo = lo.min(s);
        hi = hi.max(s);
    }
    let range = if hi > lo { f64::from(hi - lo) } else { 1.0 };
    for y in 0..heatmap.height() {
        for x in 0..heatmap.width() {
            let s = f64::from(scores[y * heatmap.width() + x] - lo) / range;
            out.put_pixel((x_off + x) as u32, y as u32, image::Rgb(heat_color(s)));
        }
    }
}

/// Black → red → yellow → white ramp on [0, 1].
fn heat_color(s: f64) -> [u8; 3] {
    let ramp = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [ramp(3.0 * s), ramp(3.0 * s - 1.0), ramp(3.0 * s - 2.0)]
}
