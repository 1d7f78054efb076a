//! `rddpm evaluate`: runs the pixel metrics over a dataset's eval split
//! with a trained checkpoint and writes the report, per-image CSV, every
//! heatmap PNG, and side-by-side review panels for the first few images.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corruption::{load_dataset, Split};
use crate::metrics::{evaluate_full, EvalConfig, EvalOutputs};
use crate::model::RefNet;
use crate::trainer::load_checkpoint;
use crate::{Error, Result};

use super::{
    ensure_dir, file_sha256, hash_outputs, panels, resolve_with_config, write_manifest, CommonArgs,
};

#[derive(Debug, clap::Args)]
pub(crate) struct EvaluateArgs {
    #[command(flatten)]
    pub(crate) common: CommonArgs,

    /// Trained checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file whose eval split is scored.
    #[arg(long)]
    data: PathBuf,

    /// Fraction of the diffusion chain used to noise before denoising.
    #[arg(long)]
    fraction: Option<f64>,
    /// Stochastic reconstructions averaged per image.
    #[arg(long)]
    repeats: Option<usize>,
    /// Average per-image metrics instead of pooling all pixels.
    #[arg(long)]
    per_image_mean: bool,
    /// Evaluation-time chain length (default: the checkpoint's).
    #[arg(long)]
    t_steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    /// Side-by-side panels written for the first N eval images.
    #[arg(long)]
    panels: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct EvalSettings {
    #[serde(flatten)]
    pub eval: EvalConfig,
    pub panels: usize,
}

/// One-row summary written to `metrics.csv`.
#[derive(Debug, Serialize)]
struct MetricsRow {
    auroc: f64,
    auprc: f64,
    masked_mse: f64,
    positives: u64,
    negatives: u64,
}

pub(crate) fn run(args: EvaluateArgs) -> Result<()> {
    let out = args.common.out.clone();
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let net = RefNet::from_params(&ckpt.model, &ckpt.params)?;

    let scale = args.common.profile.scale();
    let defaults = EvalSettings {
        eval: EvalConfig {
            noising_fraction: 0.25,
            repeats: scale.eval_repeats,
            per_image_mean: false,
            t_steps: ckpt.config.t_steps,
            beta_start: ckpt.config.beta_start,
            beta_end: ckpt.config.beta_end,
            seed: 0,
        },
        panels: 8,
    };
    let mut settings = resolve_with_config(defaults, args.common.config.as_deref())?;
    if let Some(v) = args.fraction {
        settings.eval.noising_fraction = v;
    }
    if let Some(v) = args.repeats {
        settings.eval.repeats = v;
    }
    if args.per_image_mean {
        settings.eval.per_image_mean = true;
    }
    if let Some(v) = args.t_steps {
        settings.eval.t_steps = v;
    }
    if let Some(v) = args.beta_start {
        settings.eval.beta_start = v;
    }
    if let Some(v) = args.beta_end {
        settings.eval.beta_end = v;
    }
    if let Some(v) = args.common.seed {
        settings.eval.seed = v;
    }
    if let Some(v) = args.panels {
        settings.panels = v;
    }

    let (patches, _header) = load_dataset(&args.data)?;
    let outputs = evaluate_full(&net, &patches, &settings.eval)?;
    let written = write_artifacts(&out, &patches, &outputs, settings.panels)?;

    let report = &outputs.report;
    let mut inputs = serde_json::Map::new();
    inputs.insert(args.checkpoint.display().to_string(), file_sha256(&args.checkpoint)?.into());
    inputs.insert(args.data.display().to_string(), file_sha256(&args.data)?.into());
    if let Some(path) = &args.common.config {
        inputs.insert(path.display().to_string(), file_sha256(path)?.into());
    }
    let manifest = json!({
        "command": "evaluate",
        "config": settings,
        "inputs": inputs,
        "metrics": {
            "auroc": report.auroc,
            "auprc": report.auprc,
            "masked_mse": report.masked_mse,
            "positives": report.positives,
            "negatives": report.negatives,
        },
        "outputs": hash_outputs(&out, &written)?,
    });
    write_manifest(&out, &manifest)?;
    println!(
        "auroc {:.6} auprc {:.6} masked_mse {:.8} ({} eval images)",
        report.auroc,
        report.auprc,
        report.masked_mse,
        report.per_image.len()
    );
    Ok(())
}

/// Writes report.json, per_image.csv, metrics.csv, heatmaps/, and
/// panels/; returns the relative paths written.
fn write_artifacts(
    out: &Path,
    patches: &[crate::corruption::LabeledPatch],
    outputs: &EvalOutputs,
    panel_count: usize,
) -> Result<Vec<String>> {
    let report_path = out.join("report.json");
    let mut report_text = serde_json::to_string_pretty(&outputs.report)
        .map_err(|e| Error::invalid(format!("cannot serialize report: {e}")))?;
    report_text.push('\n');
    std::fs::write(&report_path, report_text).map_err(|e| Error::io(&report_path, e))?;

    let per_image_path = out.join("per_image.csv");
    let mut writer = csv::Writer::from_path(&per_image_path)
        .map_err(|e| Error::format(&per_image_path, e.to_string()))?;
    for row in &outputs.report.per_image {
        writer.serialize(row).map_err(|e| Error::format(&per_image_path, e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(&per_image_path, e))?;

    let metrics_path = out.join("metrics.csv");
    let mut writer = csv::Writer::from_path(&metrics_path)
        .map_err(|e| Error::format(&metrics_path, e.to_string()))?;
    writer
        .serialize(MetricsRow {
            auroc: outputs.report.auroc,
            auprc: outputs.report.auprc,
            masked_mse: outputs.report.masked_mse,
            positives: outputs.report.positives,
            negatives: outputs.report.negatives,
        })
        .map_err(|e| Error::format(&metrics_path, e.to_string()))?;
    writer.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let mut written =
        vec!["report.json".to_string(), "per_image.csv".to_string(), "metrics.csv".to_string()];

    ensure_dir(&out.join("heatmaps"))?;
    for (i, heatmap) in outputs.heatmaps.iter().enumerate() {
        let rel = format!("heatmaps/eval_{i:04}.png");
        heatmap.save_png(&out.join(&rel))?;
        written.push(rel);
    }

    let eval_inputs: Vec<&crate::corruption::LabeledPatch> =
        patches.iter().filter(|p| p.split == Split::Eval).collect();
    let n_panels = panel_count.min(eval_inputs.len());
    if n_panels > 0 {
        ensure_dir(&out.join("panels"))?;
        for i in 0..n_panels {
            let rel = format!("panels/eval_{i:04}.png");
            panels::save_panel(
                &out.join(&rel),
                &eval_inputs[i].image,
                &outputs.reconstructions[i],
                &outputs.heatmaps[i],
            )?;
            written.push(rel);
        }
    }
    Ok(written)
}
