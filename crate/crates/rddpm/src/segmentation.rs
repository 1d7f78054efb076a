//! Reconstruction-based anomaly segmentation: noise the input partway down
//! the diffusion chain, denoise it back, and score each pixel by how far
//! the reconstruction landed from the input.
//!
//! A model trained on (mostly) normal data pulls its reconstruction toward
//! the normal appearance, so anomalous pixels show large reconstruction
//! error while normal pixels survive the round trip nearly unchanged.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::core::{save_heatmap_png, ImageTensor, RngState};
use crate::diffusion::reconstruct;
use crate::model::NoisePredictor;
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Per-pixel anomaly scores for one image.
///
/// Scores are nonnegative, row-major, one per pixel (channel differences
/// are averaged away), and share the source image's spatial shape.
#[derive(Clone, Debug)]
pub struct Heatmap {
    scores: Vec<f32>,
    height: usize,
    width: usize,
    /// Caller-chosen identifier of the scored image, carried into reports.
    pub source_id: String,
    /// Fraction of the diffusion chain the input was noised through.
    pub noising_fraction: f64,
}

impl Heatmap {
    /// Wraps raw scores, enforcing shape agreement and nonnegativity.
    pub fn new(
        scores: Vec<f32>,
        height: usize,
        width: usize,
        source_id: String,
        noising_fraction: f64,
    ) -> Result<Self> {
        if scores.len() != height * width || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "heatmap of {} scores does not fill {height}x{width}",
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::invalid("heatmap scores must be finite and nonnegative"));
        }
        Ok(Heatmap { scores, height, width, source_id, noising_fraction })
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Writes the raw scores as a flat little-endian float32 file,
    /// row-major, no header; the spatial shape travels separately
    /// (reports, PNG twin file).
    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut bytes = Vec::with_capacity(self.scores.len() * 4);
        for s in &self.scores {
            bytes.extend_from_slice(&s.to_le_bytes());
        }
        out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        out.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        Ok(())
    }

    /// Writes an 8-bit PNG visualization, min-max normalized for display;
    /// metrics must consume [`Heatmap::scores`], not the PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_heatmap_png(&self.scores, self.height, self.width, path)
    }
}

/// Builds the heatmap for a reconstruction already in hand: per pixel, the
/// channel-mean of the absolute difference against the input.
pub fn difference_heatmap(
    input: &ImageTensor,
    reconstruction: &ImageTensor,
    noising_fraction: f64,
) -> Result<Heatmap> {
    if input.shape() != reconstruction.shape() {
        return Err(Error::invalid(format!(
            "input shape {:?} does not match reconstruction shape {:?}",
            input.shape(),
            reconstruction.shape()
        )));
    }
    let (channels, height, width) = input.shape();
    let mut scores = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let mut sum = 0.0f64;
            for c in 0..channels {
                sum += (reconstruction.get(c, y, x) as f64 - input.get(c, y, x) as f64).abs();
            }
            scores.push((sum / channels as f64) as f32);
        }
    }
    Heatmap::new(scores, height, width, String::new(), noising_fraction)
}

/// Segments one normalized image: partial noising, denoising, and the
/// absolute-difference heatmap of the round trip.
pub fn segment(
    x_in: &ImageTensor,
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    noising_fraction: f64,
    rng: &mut RngState,
) -> Result<Heatmap> {
    if !x_in.is_normalized() {
        return Err(Error::invalid("segmentation input must lie in [-1, 1]"));
    }
    let reconstruction = reconstruct(model, x_in, schedule, noising_fraction, rng)?;
    difference_heatmap(x_in, &reconstruction, noising_fraction)
}

/// Draws `repeats` independent reconstructions of one normalized image.
///
/// Each repeat runs on its own stream derived from `rng`, so the set of
/// reconstructions is independent of evaluation order and of how many
/// other images share the run.
pub fn reconstructions(
    x_in: &ImageTensor,
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    noising_fraction: f64,
    repeats: usize,
    rng: &RngState,
) -> Result<Vec<ImageTensor>> {
    if repeats == 0 {
        return Err(Error::invalid("at least one reconstruction is required"));
    }
    if !x_in.is_normalized() {
        return Err(Error::invalid("segmentation input must lie in [-1, 1]"));
    }
    (0..repeats)
        .into_par_iter()
        .map(|k| {
            let mut repeat_rng = rng.split_indexed("repeat", k as u64);
            reconstruct(model, x_in, schedule, noising_fraction, &mut repeat_rng)
        })
        .collect()
}

/// Averages the per-reconstruction difference heatmaps of one input.
pub fn average_difference_heatmap(
    input: &ImageTensor,
    recons: &[ImageTensor],
    noising_fraction: f64,
) -> Result<Heatmap> {
    if recons.is_empty() {
        return Err(Error::invalid("averaging needs at least one reconstruction"));
    }
    let (_, height, width) = input.shape();
    let mut sums = vec![0.0f64; height * width];
    for recon in recons {
        let map = difference_heatmap(input, recon, noising_fraction)?;
        for (acc, s) in sums.iter_mut().zip(map.scores()) {
            *acc += *s as f64;
        }
    }
    let scores: Vec<f32> =
        sums.iter().map(|s| (s / recons.len() as f64) as f32).collect();
    Heatmap::new(scores, height, width, String::new(), noising_fraction)
}

/// [`segment`] averaged over `repeats` independent reconstructions.
///
/// The reverse process is stochastic, so one reconstruction carries
/// sampling noise in its scores; averaging several shrinks that noise on
/// normal pixels.
pub fn segment_averaged(
    x_in: &ImageTensor,
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    noising_fraction: f64,
    repeats: usize,
    rng: &RngState,
) -> Result<Heatmap> {
    let recons = reconstructions(x_in, model, schedule, noising_fraction, repeats, rng)?;
    average_difference_heatmap(x_in, &recons, noising_fraction)
}

/// Tiling plan for scoring an image larger than the model's patch size.
#[derive(Clone, Copy, Debug)]
pub struct TileConfig {
    /// Square patch side the model was trained on.
    pub patch_size: usize,
    /// Step between tile origins; `stride == patch_size` partitions the
    /// image, smaller strides overlap and average.
    pub stride: usize,
}

impl TileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::invalid("tile patch size must be positive"));
        }
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::invalid(format!(
                "tile stride must lie in 1..={}, got {}",
                self.patch_size, self.stride
            )));
        }
        Ok(())
    }
}

/// Segments a full image by tiling it into patches, scoring each tile, and
/// stitching the scores back; pixels covered by several tiles get the mean
/// of their contributions. When the stride does not divide the image, the
/// final row/column of tiles aligns to the image edge so every pixel is
/// covered.
pub fn segment_image(
    image: &ImageTensor,
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    noising_fraction: f64,
    tile: &TileConfig,
    rng: &RngState,
) -> Result<Heatmap> {
    tile.validate()?;
    let (_, height, width) = image.shape();
    let side = tile.patch_size;
    if height < side || width < side {
        return Err(Error::invalid(format!(
            "image {height}x{width} is smaller than the {side}x{side} patch"
        )));
    }

    let ys = tile_origins(height, side, tile.stride);
    let xs = tile_origins(width, side, tile.stride);
    let origins: Vec<(usize, usize)> =
        ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();

    let tiles: Vec<Heatmap> = origins
        .par_iter()
        .enumerate()
        .map(|(idx, &(y0, x0))| {
            let patch = crop(image, y0, x0, side)?;
            let mut tile_rng = rng.split_indexed("tile", idx as u64);
            segment(&patch, model, schedule, noising_fraction, &mut tile_rng)
        })
        .collect::<Result<_>>()?;

    let mut sums = vec![0.0f64; height * width];
    let mut counts = vec![0u32; height * width];
    for (&(y0, x0), map) in origins.iter().zip(&tiles) {
        for dy in 0..side {
            for dx in 0..side {
                let p = (y0 + dy) * width + (x0 + dx);
                sums[p] += map.scores()[dy * side + dx] as f64;
                counts[p] += 1;
            }
        }
    }
    let scores: Vec<f32> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| (s / n as f64) as f32)
        .collect();
    Heatmap::new(scores, height, width, String::new(), noising_fraction)
}

/// Tile origins along one axis: a stride grid, plus an edge-aligned final
/// origin when the stride leaves a remainder.
fn tile_origins(extent: usize, side: usize, stride: usize) -> Vec<usize> {
    let mut origins: Vec<usize> = (0..=extent - side).step_by(stride).collect();
    let last = extent - side;
    if *origins.last().expect("at least one origin") != last {
        origins.push(last);
    }
    origins
}

fn crop(image: &ImageTensor, y0: usize, x0: usize, side: usize) -> Result<ImageTensor> {
    let (channels, _, _) = image.shape();
    let mut data = Vec::with_capacity(channels * side * side);
    for c in 0..channels {
        for dy in 0..side {
            for dx in 0..side {
                data.push(image.get(c, y0 + dy, x0 + dx));
            }
        }
    }
    ImageTensor::from_data(channels, side, side, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::gaussian_like;
    use crate::model::{LinearPredictor, Trace};
    use crate::schedule::linear_schedule;

    /// Predicts zero noise everywhere; reconstructions are then pure
    /// schedule arithmetic plus the reverse-step noise draws.
    struct ZeroPredictor;

    impl NoisePredictor for ZeroPredictor {
        fn forward_traced(&self, x: &ImageTensor, _t: usize) -> Result<(Vec<f64>, Trace)> {
            Ok((vec![0.0; x.len()], Trace::new(Vec::new())))
        }

        fn backward(
            &self,
            _x: &ImageTensor,
            _t: usize,
            _trace: &Trace,
            _upstream: &[f64],
        ) -> Result<Vec<f64>> {
            Ok(Vec::new())
        }

        fn params(&self) -> &[f32] {
            &[]
        }

        fn set_params(&mut self, _params: &[f32]) -> Result<()> {
            Ok(())
        }
    }

    fn unit_image(seed: u64, shape: (usize, usize, usize)) -> ImageTensor {
        let mut rng = RngState::from_seed(seed);
        let mut img = gaussian_like(shape, &mut rng).unwrap();
        img.clamp_unit();
        img
    }

    #[test]
    fn identical_reconstruction_yields_zero_heatmap() {
        let x = unit_image(1, (3, 5, 5));
        let map = difference_heatmap(&x, &x, 0.25).unwrap();
        assert_eq!(map.height(), 5);
        assert_eq!(map.width(), 5);
        assert!(map.scores().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn single_channel_heatmap_is_elementwise_absolute_difference() {
        let x = unit_image(2, (1, 4, 4));
        let r = unit_image(3, (1, 4, 4));
        let map = difference_heatmap(&x, &r, 0.25).unwrap();
        for y in 0..4 {
            for xx in 0..4 {
                let want = (r.get(0, y, xx) as f64 - x.get(0, y, xx) as f64).abs() as f32;
                assert_eq!(map.scores()[y * 4 + xx].to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn multi_channel_heatmap_averages_channels() {
        let x = unit_image(4, (3, 4, 4));
        let r = unit_image(5, (3, 4, 4));
        let map = difference_heatmap(&x, &r, 0.25).unwrap();
        for y in 0..4 {
            for xx in 0..4 {
                let mean = (0..3)
                    .map(|c| (r.get(c, y, xx) as f64 - x.get(c, y, xx) as f64).abs())
                    .sum::<f64>()
                    / 3.0;
                assert!((map.scores()[y * 4 + xx] as f64 - mean).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn segment_is_deterministic_given_seed() {
        let x = unit_image(6, (1, 6, 6));
        let schedule = linear_schedule(30, 0.001, 0.02).unwrap();
        let model =
            LinearPredictor::new((1, 6, 6), &mut RngState::from_seed(7)).unwrap();
        let run = |seed: u64| {
            let mut rng = RngState::from_seed(seed);
            segment(&x, &model, &schedule, 0.25, &mut rng).unwrap()
        };
        let a = run(40);
        let b = run(40);
        let c = run(41);
        let bits = |m: &Heatmap| m.scores().iter().map(|s| s.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c), "different seeds should reconstruct differently");
        assert!(a.scores().iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn rejects_unnormalized_input_and_bad_fraction() {
        let schedule = linear_schedule(30, 0.001, 0.02).unwrap();
        let model =
            LinearPredictor::new((1, 4, 4), &mut RngState::from_seed(8)).unwrap();
        let mut rng = RngState::from_seed(9);

        let wild = ImageTensor::from_data(1, 4, 4, vec![3.0; 16]).unwrap();
        assert!(segment(&wild, &model, &schedule, 0.25, &mut rng).is_err());

        let x = unit_image(10, (1, 4, 4));
        assert!(segment(&x, &model, &schedule, 0.0, &mut rng).is_err());
        assert!(segment(&x, &model, &schedule, 1.5, &mut rng).is_err());
    }

    #[test]
    fn averaging_over_more_repeats_shrinks_score_variance() {
        // Variance of the per-pixel score across independent base seeds
        // should fall roughly like 1/k when each run averages k
        // reconstructions of the same normal image.
        let x = unit_image(11, (1, 6, 6));
        let schedule = linear_schedule(30, 0.001, 0.02).unwrap();
        let model = ZeroPredictor;
        let runs = 12;

        let mean_variance = |repeats: usize| {
            let mut per_run: Vec<Vec<f32>> = Vec::new();
            for r in 0..runs {
                let rng = RngState::from_seed(1000 + r);
                let map =
                    segment_averaged(&x, &model, &schedule, 0.25, repeats, &rng).unwrap();
                per_run.push(map.scores().to_vec());
            }
            let pixels = per_run[0].len();
            let mut total = 0.0f64;
            for p in 0..pixels {
                let vals: Vec<f64> = per_run.iter().map(|m| m[p] as f64).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                    / (vals.len() - 1) as f64;
                total += var;
            }
            total / pixels as f64
        };

        let v1 = mean_variance(1);
        let v4 = mean_variance(4);
        let v16 = mean_variance(16);
        assert!(v1 > v4, "variance did not drop from k=1 ({v1}) to k=4 ({v4})");
        assert!(v4 > v16, "variance did not drop from k=4 ({v4}) to k=16 ({v16})");
    }

    #[test]
    fn averaged_map_with_one_repeat_matches_plain_segment() {
        let x = unit_image(12, (1, 6, 6));
        let schedule = linear_schedule(30, 0.001, 0.02).unwrap();
        let model =
            LinearPredictor::new((1, 6, 6), &mut RngState::from_seed(13)).unwrap();
        let rng = RngState::from_seed(50);
        let averaged = segment_averaged(&x, &model, &schedule, 0.25, 1, &rng).unwrap();
        let mut single_rng = rng.split_indexed("repeat", 0);
        let single = segment(&x, &model, &schedule, 0.25, &mut single_rng).unwrap();
        let ba: Vec<u32> = averaged.scores().iter().map(|s| s.to_bits()).collect();
        let bs: Vec<u32> = single.scores().iter().map(|s| s.to_bits()).collect();
        assert_eq!(ba, bs);
    }

    #[test]
    fn partitioning_tiles_stitch_without_seams() {
        // stride == patch side on an exactly divisible image: the stitched
        // map must equal each tile segmented on its own, bit for bit.
        let x = unit_image(14, (1, 8, 8));
        let schedule = linear_schedule(20, 0.001, 0.02).unwrap();
        let model =
            LinearPredictor::new((1, 4, 4), &mut RngState::from_seed(15)).unwrap();
        let rng = RngState::from_seed(60);
        let tile = TileConfig { patch_size: 4, stride: 4 };
        let stitched = segment_image(&x, &model, &schedule, 0.25, &tile, &rng).unwrap();
        assert_eq!(stitched.height(), 8);
        assert_eq!(stitched.width(), 8);

        for (idx, (y0, x0)) in [(0, 0), (0, 4), (4, 0), (4, 4)].iter().enumerate() {
            let patch = crop(&x, *y0, *x0, 4).unwrap();
            let mut tile_rng = rng.split_indexed("tile", idx as u64);
            let solo = segment(&patch, &model, &schedule, 0.25, &mut tile_rng).unwrap();
            for dy in 0..4 {
                for dx in 0..4 {
                    let got = stitched.scores()[(y0 + dy) * 8 + (x0 + dx)];
                    let want = solo.scores()[dy * 4 + dx];
                    assert_eq!(got.to_bits(), want.to_bits(), "seam at tile {idx}");
                }
            }
        }
    }

    #[test]
    fn overlapping_tiles_average_their_contributions() {
        let x = unit_image(16, (1, 8, 8));
        let schedule = linear_schedule(20, 0.001, 0.02).unwrap();
        let model =
            LinearPredictor::new((1, 4, 4), &mut RngState::from_seed(17)).unwrap();
        let rng = RngState::from_seed(61);
        let tile = TileConfig { patch_size: 4, stride: 2 };
        let stitched = segment_image(&x, &model, &schedule, 0.25, &tile, &rng).unwrap();

        // Recompute the expected average at a few pixels from scratch.
        let origins: Vec<(usize, usize)> = [0usize, 2, 4]
            .iter()
            .flat_map(|&y| [0usize, 2, 4].iter().map(move |&xx| (y, xx)))
            .collect();
        let mut maps = Vec::new();
        for (idx, &(y0, x0)) in origins.iter().enumerate() {
            let patch = crop(&x, y0, x0, 4).unwrap();
            let mut tile_rng = rng.split_indexed("tile", idx as u64);
            maps.push(segment(&patch, &model, &schedule, 0.25, &mut tile_rng).unwrap());
        }
        for &(py, px) in &[(0usize, 0usize), (3, 3), (4, 4), (7, 7), (2, 5)] {
            let mut sum = 0.0f64;
            let mut n = 0u32;
            for (&(y0, x0), map) in origins.iter().zip(&maps) {
                if py >= y0 && py < y0 + 4 && px >= x0 && px < x0 + 4 {
                    sum += map.scores()[(py - y0) * 4 + (px - x0)] as f64;
                    n += 1;
                }
            }
            let want = (sum / n as f64) as f32;
            let got = stitched.scores()[py * 8 + px];
            assert_eq!(got.to_bits(), want.to_bits(), "pixel ({py}, {px})");
        }
        // Interior pixels see several tiles under stride 2.
        assert!(origins.len() == 9);
    }

    #[test]
    fn edge_alignment_covers_every_pixel() {
        // 7x7 with patch 4, stride 4: origins 0 and 3 (edge-aligned).
        let x = unit_image(18, (1, 7, 7));
        let schedule = linear_schedule(20, 0.001, 0.02).unwrap();
        let model =
            LinearPredictor::new((1, 4, 4), &mut RngState::from_seed(19)).unwrap();
        let rng = RngState::from_seed(62);
        let tile = TileConfig { patch_size: 4, stride: 4 };
        let map = segment_image(&x, &model, &schedule, 0.25, &tile, &rng).unwrap();
        assert_eq!(map.scores().len(), 49);
        // Reconstruction error is almost surely nonzero at every pixel; a
        // zero would indicate an uncovered hole defaulting to 0/0 handling.
        assert!(map.scores().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn tiling_rejects_undersized_images_and_bad_configs() {
        let x = unit_image(20, (1, 4, 4));
        let schedule = linear_schedule(20, 0.001, 0.02).unwrap();
        let model =
            LinearPredictor::new((1, 8, 8), &mut RngState::from_seed(21)).unwrap();
        let rng = RngState::from_seed(63);
        let tile = TileConfig { patch_size: 8, stride: 8 };
        assert!(segment_image(&x, &model, &schedule, 0.25, &tile, &rng).is_err());

        assert!(TileConfig { patch_size: 0, stride: 1 }.validate().is_err());
        assert!(TileConfig { patch_size: 4, stride: 0 }.validate().is_err());
        assert!(TileConfig { patch_size: 4, stride: 5 }.validate().is_err());
        assert!(TileConfig { patch_size: 4, stride: 4 }.validate().is_ok());
    }

    #[test]
    fn heatmap_raw_file_round_trips_and_png_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let x = unit_image(22, (1, 5, 5));
        let r = unit_image(23, (1, 5, 5));
        let map = difference_heatmap(&x, &r, 0.25).unwrap();

        let raw = dir.path().join("map.f32");
        map.save_raw(&raw).unwrap();
        let bytes = std::fs::read(&raw).unwrap();
        assert_eq!(bytes.len(), 25 * 4);
        let loaded: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let want: Vec<u32> = map.scores().iter().map(|s| s.to_bits()).collect();
        let got: Vec<u32> = loaded.iter().map(|s| s.to_bits()).collect();
        assert_eq!(got, want);

        let png = dir.path().join("map.png");
        map.save_png(&png).unwrap();
        assert!(png.metadata().unwrap().len() > 0);
    }

    #[test]
    fn heatmap_constructor_enforces_invariants() {
        assert!(Heatmap::new(vec![0.0; 6], 2, 3, String::new(), 0.25).is_ok());
        assert!(Heatmap::new(vec![0.0; 5], 2, 3, String::new(), 0.25).is_err());
        assert!(Heatmap::new(vec![-0.1; 6], 2, 3, String::new(), 0.25).is_err());
        assert!(Heatmap::new(vec![f32::NAN; 6], 2, 3, String::new(), 0.25).is_err());
        assert!(Heatmap::new(Vec::new(), 0, 0, String::new(), 0.25).is_err());
    }
}
