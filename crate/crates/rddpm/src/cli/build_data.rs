//! `rddpm build-data`: writes a labeled patch dataset to `<out>/data.rdds`.
//!
//! Two sources are supported. The default is the synthetic pipeline:
//! procedural texture patches with bright-block defects injected into a
//! chosen fraction of the training split and (independently) of the eval
//! split. Alternatively `--mvtec <root> --class <name>` tiles an
//! MVTec-style directory; its `test` images become the eval split, and a
//! nonzero contamination ratio mixes copies of real defective eval
//! patches into the training split.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::core::RngState;
use crate::corruption::{
    contaminate_with_real, corrupt, generate_texture_dataset, load_mvtec_layout, save_dataset,
    CorruptionSpec, LabeledPatch, MvtecLayoutConfig, Split, TextureParams,
};
use crate::{Error, Result};

use super::{file_sha256, hash_outputs, resolve_with_config, write_manifest, CommonArgs};

#[derive(Debug, clap::Args)]
pub(crate) struct BuildDataArgs {
    #[command(flatten)]
    pub(crate) common: CommonArgs,

    /// Training patches to synthesize.
    #[arg(long)]
    n_train: Option<usize>,
    /// Eval patches to synthesize.
    #[arg(long)]
    n_eval: Option<usize>,
    /// Fraction of training patches that receive defects.
    #[arg(long)]
    contamination: Option<f64>,
    /// Fraction of eval patches that receive defects.
    #[arg(long)]
    eval_contamination: Option<f64>,
    /// Fraction of each defective patch's 2x2 blocks that are altered.
    #[arg(long)]
    block_fraction: Option<f64>,
    /// Brightness multiplier of altered blocks (offset scale).
    #[arg(long)]
    intensity_factor: Option<f64>,
    /// Square patch side in pixels.
    #[arg(long)]
    patch_size: Option<usize>,
    /// Channels of synthetic patches (1 or 3).
    #[arg(long)]
    channels: Option<usize>,

    /// MVTec-style dataset root; switches from synthesis to tiling.
    #[arg(long)]
    mvtec: Option<PathBuf>,
    /// Class directory under the MVTec root (e.g. grid, carpet).
    #[arg(long, requires = "mvtec")]
    class: Option<String>,
    /// Square working resolution images are resized to before tiling.
    #[arg(long, requires = "mvtec")]
    resolution: Option<u32>,
    /// Keep RGB channels instead of converting to grayscale.
    #[arg(long, requires = "mvtec")]
    rgb: bool,
}

/// Resolved synthetic-data configuration; the dataset header and manifest
/// both embed it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval: usize,
    /// Fraction of training patches that receive defects.
    pub contamination: f64,
    /// Fraction of eval patches that receive defects. Defaults to 0.5 so
    /// ranking metrics stay defined even when the training split is clean.
    pub eval_contamination: f64,
    pub block_fraction: f64,
    pub intensity_factor: f64,
    pub patch_size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl DataConfig {
    /// Profile-scaled defaults (patch geometry is profile-independent).
    pub fn for_profile(profile: super::Profile) -> DataConfig {
        let scale = profile.scale();
        DataConfig {
            n_train: scale.n_train,
            n_eval: scale.n_eval,
            contamination: 0.2,
            eval_contamination: 0.5,
            block_fraction: 0.7,
            intensity_factor: 5.0,
            patch_size: 28,
            channels: 1,
            seed: 0,
        }
    }
}

/// Synthesizes the texture dataset described by `config`: contaminated
/// training split first, then the eval split, each corrupted from its own
/// random stream derived from `config.seed`.
pub fn build_synthetic_dataset(config: &DataConfig) -> Result<Vec<LabeledPatch>> {
    let texture = TextureParams {
        size: config.patch_size,
        channels: config.channels,
        ..TextureParams::default()
    };
    let root = RngState::from_seed(config.seed);

    let clean_train = generate_texture_dataset(config.n_train, &texture, &root.split("train_textures"))?;
    let train_spec = CorruptionSpec {
        contamination_ratio: config.contamination,
        block_fraction: config.block_fraction,
        intensity_factor: config.intensity_factor,
        seed: config.seed,
    };
    let mut patches = corrupt(&clean_train, &train_spec, &mut root.split("train_corrupt"))?;

    let clean_eval = generate_texture_dataset(config.n_eval, &texture, &root.split("eval_textures"))?;
    let eval_spec = CorruptionSpec { contamination_ratio: config.eval_contamination, ..train_spec };
    let mut eval = corrupt(&clean_eval, &eval_spec, &mut root.split("eval_corrupt"))?;
    for patch in &mut eval {
        patch.split = Split::Eval;
    }
    patches.extend(eval);
    Ok(patches)
}

/// Per-split patch counts reported by the manifest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub(crate) struct SplitCounts {
    pub train_total: usize,
    pub train_contaminated: usize,
    pub eval_total: usize,
    pub eval_contaminated: usize,
}

pub(crate) fn count_splits(patches: &[LabeledPatch]) -> SplitCounts {
    let mut counts =
        SplitCounts { train_total: 0, train_contaminated: 0, eval_total: 0, eval_contaminated: 0 };
    for p in patches {
        match p.split {
            Split::Train => {
                counts.train_total += 1;
                counts.train_contaminated += usize::from(p.is_contaminated);
            }
            Split::Eval => {
                counts.eval_total += 1;
                counts.eval_contaminated += usize::from(p.is_contaminated);
            }
        }
    }
    counts
}

pub(crate) fn run(args: BuildDataArgs) -> Result<()> {
    let out = args.common.out.clone();
    let (patches, resolved, inputs) = if args.mvtec.is_some() {
        build_mvtec(&args)?
    } else {
        build_synthetic(&args)?
    };

    let counts = count_splits(&patches);
    let data_path = out.join("data.rdds");
    save_dataset(&data_path, &patches, &resolved)?;

    let manifest = json!({
        "command": "build-data",
        "config": resolved,
        "counts": counts,
        "inputs": inputs,
        "outputs": hash_outputs(&out, &["data.rdds".to_string()])?,
    });
    write_manifest(&out, &manifest)?;
    println!(
        "wrote {} ({} train patches, {} contaminated; {} eval patches, {} contaminated)",
        data_path.display(),
        counts.train_total,
        counts.train_contaminated,
        counts.eval_total,
        counts.eval_contaminated
    );
    Ok(())
}

type BuiltData = (Vec<LabeledPatch>, serde_json::Value, serde_json::Value);

fn build_synthetic(args: &BuildDataArgs) -> Result<BuiltData> {
    let mut config = resolve_with_config(
        DataConfig::for_profile(args.common.profile),
        args.common.config.as_deref(),
    )?;
    if let Some(v) = args.n_train {
        config.n_train = v;
    }
    if let Some(v) = args.n_eval {
        config.n_eval = v;
    }
    if let Some(v) = args.contamination {
        config.contamination = v;
    }
    if let Some(v) = args.eval_contamination {
        config.eval_contamination = v;
    }
    if let Some(v) = args.block_fraction {
        config.block_fraction = v;
    }
    if let Some(v) = args.intensity_factor {
        config.intensity_factor = v;
    }
    if let Some(v) = args.patch_size {
        config.patch_size = v;
    }
    if let Some(v) = args.channels {
        config.channels = v;
    }
    if let Some(v) = args.common.seed {
        config.seed = v;
    }

    let patches = build_synthetic_dataset(&config)?;
    let resolved = serde_json::to_value(&config)
        .map_err(|e| Error::invalid(format!("cannot serialize config: {e}")))?;
    let inputs = config_input_hashes(args)?;
    Ok((patches, resolved, inputs))
}

fn build_mvtec(args: &BuildDataArgs) -> Result<BuiltData> {
    let root = args.mvtec.as_ref().expect("checked by caller");
    let class = args
        .class
        .as_ref()
        .ok_or_else(|| Error::invalid("--mvtec needs --class <name> to pick a class directory"))?;
    let layout = MvtecLayoutConfig {
        resolution: args.resolution.unwrap_or(112),
        patch_size: args.patch_size.unwrap_or(28),
        grayscale: !args.rgb,
    };
    let contamination = args.contamination.unwrap_or(0.0);
    let seed = args.common.seed.unwrap_or(0);

    let class_dir = root.join(class);
    let loaded = load_mvtec_layout(&class_dir, &layout)?;
    let patches = if contamination > 0.0 {
        // Real contamination: copy defective eval patches into the train
        // split until it holds the requested defective fraction. The
        // originals stay in the eval split.
        let (train, eval): (Vec<_>, Vec<_>) =
            loaded.into_iter().partition(|p| p.split == Split::Train);
        let mut rng = RngState::from_seed(seed).split("real_contamination");
        let mut mixed = contaminate_with_real(&train, &eval, contamination, &mut rng)?;
        mixed.extend(eval);
        mixed
    } else {
        loaded
    };

    let resolved = json!({
        "mvtec": class_dir.display().to_string(),
        "resolution": layout.resolution,
        "patch_size": layout.patch_size,
        "grayscale": layout.grayscale,
        "contamination": contamination,
        "seed": seed,
    });
    let inputs = config_input_hashes(args)?;
    Ok((patches, resolved, inputs))
}

fn config_input_hashes(args: &BuildDataArgs) -> Result<serde_json::Value> {
    let mut map = serde_json::Map::new();
    if let Some(path) = &args.common.config {
        map.insert(path.display().to_string(), file_sha256(path)?.into());
    }
    Ok(serde_json::Value::Object(map))
}
