use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::core::ImageTensor;
use crate::{Error, Result};

/// Loads an 8-bit PNG as a normalized tensor: grayscale files become
/// 1×H×W, color files 3×H×W, mapping each byte p to `2p/255 - 1`.
pub fn load_png(path: &Path) -> Result<ImageTensor> {
    let img = open(path)?;
    Ok(dynimage_to_tensor(&img))
}

/// Converts a decoded image to a normalized tensor (see [`load_png`]).
pub(crate) fn dynimage_to_tensor(img: &DynamicImage) -> ImageTensor {
    match img {
        DynamicImage::ImageLuma8(gray) => gray_to_tensor(gray),
        DynamicImage::ImageRgb8(rgb) => rgb_to_tensor(rgb),
        other => match other.color().has_color() {
            true => rgb_to_tensor(&other.to_rgb8()),
            false => gray_to_tensor(&other.to_luma8()),
        },
    }
}

pub(crate) fn gray_to_tensor(img: &GrayImage) -> ImageTensor {
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| byte_to_unit(p.0[0])).collect();
    ImageTensor::from_data(1, h as usize, w as usize, data)
        .expect("decoded dimensions are consistent")
}

pub(crate) fn rgb_to_tensor(img: &RgbImage) -> ImageTensor {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[(c * h + y) * w + x] = byte_to_unit(p.0[c]);
        }
    }
    ImageTensor::from_data(3, h, w, data).expect("decoded dimensions are consistent")
}

#[inline]
fn byte_to_unit(p: u8) -> f32 {
    (2.0 * f64::from(p) / 255.0 - 1.0) as f32
}

#[inline]
pub(crate) fn unit_to_byte(v: f32) -> u8 {
    let clamped = f64::from(v).clamp(-1.0, 1.0);
    ((clamped + 1.0) * 255.0 / 2.0).round() as u8
}

/// Saves a 1- or 3-channel tensor as an 8-bit PNG, clamping to `[-1, 1]`
/// and inverting the load-time mapping.
pub fn save_png(tensor: &ImageTensor, path: &Path) -> Result<()> {
    let (c, h, w) = tensor.shape();
    let result = match c {
        1 => {
            let mut img = GrayImage::new(w as u32, h as u32);
            for (x, y, p) in img.enumerate_pixels_mut() {
                p.0[0] = unit_to_byte(tensor.get(0, y as usize, x as usize));
            }
            img.save(path)
        }
        3 => {
            let mut img = RgbImage::new(w as u32, h as u32);
            for (x, y, p) in img.enumerate_pixels_mut() {
                for ch in 0..3 {
                    p.0[ch] = unit_to_byte(tensor.get(ch, y as usize, x as usize));
                }
            }
            img.save(path)
        }
        other => {
            return Err(Error::invalid(format!("cannot encode {other}-channel tensor as PNG")))
        }
    };
    result.map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

/// Loads a ground-truth mask PNG as a flat binary map (1 = anomalous).
/// Any pixel at or above half intensity counts as anomalous.
pub fn load_mask_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mask = img.pixels().map(|p| u8::from(p.0[0] >= 128)).collect();
    Ok((mask, h as usize, w as usize))
}

/// Saves a score map as an 8-bit grayscale PNG, min-max normalized for
/// display. Raw scores, not this rescaled image, are what metrics consume.
pub fn save_heatmap_png(scores: &[f32], height: usize, width: usize, path: &Path) -> Result<()> {
    if scores.len() != height * width {
        return Err(Error::invalid(format!(
            "score length {} does not match {height}x{width}",
            scores.len()
        )));
    }
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &s in scores {
        lo = lo.min(s);
        hi = hi.max(s);
    }
    let range = if hi > lo { f64::from(hi - lo) } else { 1.0 };
    let mut img = GrayImage::new(width as u32, height as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let s = scores[y as usize * width + x as usize];
        p.0[0] = ((f64::from(s - lo) / range) * 255.0).round() as u8;
    }
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}
