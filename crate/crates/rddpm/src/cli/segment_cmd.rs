//! `rddpm segment`: scores one PNG with a trained checkpoint and writes
//! the heatmap as both raw `f32` scores and a normalized PNG.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::core::{load_png, RngState};
use crate::model::RefNet;
use crate::schedule::linear_schedule;
use crate::segmentation::{segment_averaged, segment_image, TileConfig};
use crate::trainer::load_checkpoint;
use crate::{Error, Result};

use super::{file_sha256, hash_outputs, resolve_with_config, write_manifest, CommonArgs};

#[derive(Debug, clap::Args)]
pub(crate) struct SegmentArgs {
    #[command(flatten)]
    pub(crate) common: CommonArgs,

    /// Trained checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG image to score.
    #[arg(long)]
    image: PathBuf,

    /// Fraction of the diffusion chain used to noise before denoising.
    #[arg(long)]
    fraction: Option<f64>,
    /// Stochastic reconstructions averaged (patch-sized inputs only;
    /// tiled inputs average overlapping tiles instead).
    #[arg(long)]
    repeats: Option<usize>,
    /// Patch side the model scores at a time.
    #[arg(long)]
    patch_size: Option<usize>,
    /// Tile step for images larger than one patch (default: patch size).
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct SegmentSettings {
    pub fraction: f64,
    pub repeats: usize,
    pub patch_size: usize,
    /// None partitions the image (stride = patch size).
    pub stride: Option<usize>,
    pub seed: u64,
}

impl Default for SegmentSettings {
    fn default() -> Self {
        SegmentSettings { fraction: 0.25, repeats: 1, patch_size: 28, stride: None, seed: 0 }
    }
}

pub(crate) fn run(args: SegmentArgs) -> Result<()> {
    let out = args.common.out.clone();
    let mut settings =
        resolve_with_config(SegmentSettings::default(), args.common.config.as_deref())?;
    if let Some(v) = args.fraction {
        settings.fraction = v;
    }
    if let Some(v) = args.repeats {
        settings.repeats = v;
    }
    if let Some(v) = args.patch_size {
        settings.patch_size = v;
    }
    if let Some(v) = args.stride {
        settings.stride = Some(v);
    }
    if let Some(v) = args.common.seed {
        settings.seed = v;
    }

    let ckpt = load_checkpoint(&args.checkpoint)?;
    let net = RefNet::from_params(&ckpt.model, &ckpt.params)?;
    let image = load_png(&args.image)?;
    let (channels, height, width) = image.shape();
    if channels != ckpt.model.channels {
        return Err(Error::invalid(format!(
            "image has {channels} channels but the checkpoint expects {}",
            ckpt.model.channels
        )));
    }
    let schedule =
        linear_schedule(ckpt.config.t_steps, ckpt.config.beta_start, ckpt.config.beta_end)?;
    let rng = RngState::from_seed(settings.seed).split("segment");

    let side = settings.patch_size;
    let mut heatmap = if (height, width) == (side, side) {
        segment_averaged(&image, &net, &schedule, settings.fraction, settings.repeats, &rng)?
    } else {
        let tile = TileConfig { patch_size: side, stride: settings.stride.unwrap_or(side) };
        segment_image(&image, &net, &schedule, settings.fraction, &tile, &rng)?
    };
    heatmap.source_id = args.image.display().to_string();

    heatmap.save_raw(&out.join("heatmap.f32"))?;
    heatmap.save_png(&out.join("heatmap.png"))?;

    let max_score = heatmap.scores().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut inputs = serde_json::Map::new();
    inputs.insert(args.checkpoint.display().to_string(), file_sha256(&args.checkpoint)?.into());
    inputs.insert(args.image.display().to_string(), file_sha256(&args.image)?.into());
    if let Some(path) = &args.common.config {
        inputs.insert(path.display().to_string(), file_sha256(path)?.into());
    }
    let manifest = json!({
        "command": "segment",
        "config": settings,
        "inputs": inputs,
        "outputs": hash_outputs(&out, &["heatmap.f32".to_string(), "heatmap.png".to_string()])?,
        "summary": {
            "height": height,
            "width": width,
            "max_score": max_score,
        },
    });
    write_manifest(&out, &manifest)?;
    println!("wrote {} ({}x{} scores, max {max_score:.6})", out.join("heatmap.f32").display(), height, width);
    Ok(())
}
