//! `rddpm train`: fits the reference network on a dataset's training
//! split and writes `model.ckpt`, `loss.csv`, optional per-epoch
//! checkpoints, and a manifest carrying the parameter checksum.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::core::RngState;
use crate::corruption::load_dataset;
use crate::losses::{RobustLossSpec, DEFAULT_DELTA};
use crate::model::{reference_net, ModelConfig, NoisePredictor};
use crate::trainer::{save_checkpoint, train_with_snapshots, write_loss_history, Checkpoint, TrainConfig};
use crate::{Error, Result};

use super::{
    ensure_dir, file_sha256, hash_outputs, params_sha256, resolve_with_config, write_manifest,
    CommonArgs,
};

/// Default kept fraction when `--loss lts` is given without `--lambda`.
pub(crate) const DEFAULT_LAMBDA: f64 = 0.8;

#[derive(Debug, clap::Args)]
pub(crate) struct TrainArgs {
    #[command(flatten)]
    pub(crate) common: CommonArgs,

    /// Dataset file produced by build-data.
    #[arg(long)]
    data: PathBuf,

    /// Training objective.
    #[arg(long, value_enum)]
    loss: Option<LossKind>,
    /// Huber corner; only meaningful with --loss huber.
    #[arg(long, requires = "loss")]
    delta: Option<f64>,
    /// Kept fraction of each batch; only meaningful with --loss lts.
    #[arg(long, requires = "loss")]
    lambda: Option<f64>,

    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Diffusion chain length T.
    #[arg(long)]
    t_steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    /// Hidden channels of the reference network.
    #[arg(long)]
    hidden_width: Option<usize>,
    /// Convolution layers of the reference network (at least 2).
    #[arg(long)]
    depth: Option<usize>,
    /// Epochs between intermediate checkpoints (0 = final only).
    #[arg(long)]
    checkpoint_interval: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum LossKind {
    L2,
    L1,
    Huber,
    Lts,
}

/// Everything `train` resolves: the training loop configuration plus the
/// model architecture knobs that are not derivable from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct TrainSettings {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub hidden_width: usize,
    pub depth: usize,
}

impl TrainSettings {
    pub(crate) fn for_profile(profile: super::Profile) -> TrainSettings {
        let scale = profile.scale();
        TrainSettings {
            train: TrainConfig {
                epochs: scale.epochs,
                batch_size: scale.batch_size,
                learning_rate: scale.learning_rate,
                loss: RobustLossSpec::L2,
                t_steps: scale.t_steps,
                beta_start: 0.001,
                beta_end: 0.02,
                seed: 0,
                checkpoint_interval: 0,
            },
            hidden_width: scale.hidden_width,
            depth: scale.depth,
        }
    }
}

pub(crate) fn run(args: TrainArgs) -> Result<()> {
    let out = args.common.out.clone();
    let settings = resolve_settings(&args)?;
    let (patches, _header) = load_dataset(&args.data)?;
    let channels = patches[0].image.shape().0;

    let model_config = ModelConfig {
        channels,
        hidden_width: settings.hidden_width,
        depth: settings.depth,
        t_steps: settings.train.t_steps,
    };
    let mut init_rng = RngState::from_seed(settings.train.seed).split("model_init");
    let mut net = reference_net(&model_config, &mut init_rng)?;

    let interval = settings.train.checkpoint_interval;
    let mut extra_outputs: Vec<String> = Vec::new();
    if interval > 0 {
        ensure_dir(&out.join("checkpoints"))?;
    }
    let train_config = settings.train.clone();
    let history = train_with_snapshots(&patches, &train_config, &mut net, |epoch, model, so_far| {
        let epoch_loss = mean_epoch_loss(so_far, epoch);
        eprintln!("epoch {epoch}/{}: mean loss {epoch_loss:.6}", train_config.epochs);
        if interval > 0 && epoch % interval == 0 && epoch != train_config.epochs {
            let rel = format!("checkpoints/epoch_{epoch}.ckpt");
            save_checkpoint(
                &out.join(&rel),
                &Checkpoint {
                    config: train_config.clone(),
                    model: model_config,
                    epoch,
                    params: model.params().to_vec(),
                },
            )?;
            extra_outputs.push(rel);
        }
        Ok(())
    })?;

    let checkpoint = Checkpoint {
        config: settings.train.clone(),
        model: model_config,
        epoch: settings.train.epochs,
        params: net.params().to_vec(),
    };
    save_checkpoint(&out.join("model.ckpt"), &checkpoint)?;
    write_loss_history(&out.join("loss.csv"), &history)?;

    let mut outputs = vec!["model.ckpt".to_string(), "loss.csv".to_string()];
    outputs.extend(extra_outputs);
    let params_hash = params_sha256(&checkpoint.params);
    let mut inputs = serde_json::Map::new();
    inputs.insert(args.data.display().to_string(), file_sha256(&args.data)?.into());
    if let Some(path) = &args.common.config {
        inputs.insert(path.display().to_string(), file_sha256(path)?.into());
    }
    let manifest = json!({
        "command": "train",
        "config": {
            "train": settings.train,
            "model": model_config,
        },
        "inputs": inputs,
        "outputs": hash_outputs(&out, &outputs)?,
        "params_sha256": params_hash,
        "summary": {
            "steps": history.len(),
            "final_loss": history.last().map(|r| r.loss),
        },
    });
    write_manifest(&out, &manifest)?;
    println!(
        "wrote {} ({} steps, final loss {:.6}, params sha256 {})",
        out.join("model.ckpt").display(),
        history.len(),
        history.last().map(|r| r.loss).unwrap_or(f64::NAN),
        &params_hash[..16]
    );
    Ok(())
}

fn resolve_settings(args: &TrainArgs) -> Result<TrainSettings> {
    let mut settings = resolve_with_config(
        TrainSettings::for_profile(args.common.profile),
        args.common.config.as_deref(),
    )?;
    if let Some(kind) = args.loss {
        settings.train.loss = loss_from_flags(kind, args.delta, args.lambda)?;
    }
    if let Some(v) = args.epochs {
        settings.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        settings.train.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        settings.train.learning_rate = v;
    }
    if let Some(v) = args.t_steps {
        settings.train.t_steps = v;
    }
    if let Some(v) = args.beta_start {
        settings.train.beta_start = v;
    }
    if let Some(v) = args.beta_end {
        settings.train.beta_end = v;
    }
    if let Some(v) = args.common.seed {
        settings.train.seed = v;
    }
    if let Some(v) = args.checkpoint_interval {
        settings.train.checkpoint_interval = v;
    }
    if let Some(v) = args.hidden_width {
        settings.hidden_width = v;
    }
    if let Some(v) = args.depth {
        settings.depth = v;
    }
    settings.train.validate()?;
    Ok(settings)
}

fn loss_from_flags(kind: LossKind, delta: Option<f64>, lambda: Option<f64>) -> Result<RobustLossSpec> {
    let spec = match kind {
        LossKind::L2 => RobustLossSpec::L2,
        LossKind::L1 => RobustLossSpec::L1,
        LossKind::Huber => RobustLossSpec::Huber { delta: delta.unwrap_or(DEFAULT_DELTA) },
        LossKind::Lts => RobustLossSpec::Lts { lambda: lambda.unwrap_or(DEFAULT_LAMBDA) },
    };
    match (kind, delta, lambda) {
        (LossKind::Huber, _, Some(_)) => {
            return Err(Error::invalid("--lambda only applies to --loss lts"));
        }
        (LossKind::Lts, Some(_), _) => {
            return Err(Error::invalid("--delta only applies to --loss huber"));
        }
        (LossKind::L2 | LossKind::L1, d, l) if d.is_some() || l.is_some() => {
            return Err(Error::invalid("--delta/--lambda only apply to huber/lts losses"));
        }
        _ => {}
    }
    spec.validate()?;
    Ok(spec)
}

fn mean_epoch_loss(history: &[crate::trainer::StepRecord], epoch: usize) -> f64 {
    let (sum, count) = history
        .iter()
        .filter(|r| r.epoch == epoch)
        .fold((0.0, 0usize), |(s, c), r| (s + r.loss, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}
