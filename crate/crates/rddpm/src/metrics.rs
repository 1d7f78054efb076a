//! Pixel-level evaluation: ranking metrics over anomaly scores (AUROC,
//! AUPRC) and reconstruction error over the normal region, plus the
//! dataset-wide evaluation driver that produces them from a trained model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core::{ImageTensor, RngState};
use crate::corruption::{LabeledPatch, Split};
use crate::model::NoisePredictor;
use crate::schedule::linear_schedule;
use crate::segmentation::{average_difference_heatmap, reconstructions, Heatmap};
use crate::{Error, Result};

/// How the evaluation pass segments and aggregates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Fraction of the diffusion chain used to noise inputs before
    /// reconstructing.
    #[serde(default = "defaults::noising_fraction")]
    pub noising_fraction: f64,
    /// Stochastic reconstructions averaged per image.
    #[serde(default = "defaults::repeats")]
    pub repeats: usize,
    /// Aggregate by averaging per-image metrics instead of pooling every
    /// pixel into one ranking.
    #[serde(default)]
    pub per_image_mean: bool,
    /// Diffusion chain length T used at evaluation time.
    #[serde(default = "defaults::t_steps")]
    pub t_steps: usize,
    #[serde(default = "defaults::beta_start")]
    pub beta_start: f64,
    #[serde(default = "defaults::beta_end")]
    pub beta_end: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn noising_fraction() -> f64 {
        0.25
    }
    pub fn repeats() -> usize {
        1
    }
    pub fn t_steps() -> usize {
        1000
    }
    pub fn beta_start() -> f64 {
        0.001
    }
    pub fn beta_end() -> f64 {
        0.02
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            noising_fraction: defaults::noising_fraction(),
            repeats: defaults::repeats(),
            per_image_mean: false,
            t_steps: defaults::t_steps(),
            beta_start: defaults::beta_start(),
            beta_end: defaults::beta_end(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noising_fraction > 0.0 && self.noising_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "noising fraction must lie in (0, 1], got {}",
                self.noising_fraction
            )));
        }
        if self.repeats == 0 {
            return Err(Error::invalid("evaluation needs at least one repeat"));
        }
        linear_schedule(self.t_steps, self.beta_start, self.beta_end)?;
        Ok(())
    }
}

/// One evaluated image's metric contribution.
#[derive(Clone, Debug, Serialize)]
pub struct PerImageEval {
    /// Index within the eval split, in dataset order.
    pub index: usize,
    pub positives: usize,
    pub negatives: usize,
    /// Undefined (None) when the image holds a single class.
    pub auroc: Option<f64>,
    /// Undefined (None) when the image holds no positive pixel.
    pub auprc: Option<f64>,
    /// Undefined (None) when the image holds no normal pixel.
    pub masked_mse: Option<f64>,
}

/// Dataset-level evaluation results.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub auprc: f64,
    pub masked_mse: f64,
    /// Total anomalous pixels across the eval split.
    pub positives: u64,
    /// Total normal pixels across the eval split.
    pub negatives: u64,
    pub per_image: Vec<PerImageEval>,
}

/// Everything the evaluation pass produces: the report plus the per-image
/// heatmaps and mean reconstructions, in eval-split order, for callers
/// that write image artifacts.
#[derive(Clone, Debug)]
pub struct EvalOutputs {
    pub report: EvalReport,
    pub heatmaps: Vec<Heatmap>,
    pub reconstructions: Vec<ImageTensor>,
}

/// Area under the ROC curve by the rank-sum route: the probability that a
/// uniformly drawn positive outranks a uniformly drawn negative, with ties
/// counting one half (midranks).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scored_input(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ranking needs both classes; got {positives} positive / {negatives} negative"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite"));

    // Walk ascending tie groups, assigning every member the group's mean
    // rank (1-based), and accumulate the positive ranks.
    let mut positive_rank_sum = 0.0f64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let midrank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            if labels[i] == 1 {
                positive_rank_sum += midrank;
            }
        }
        start = end;
    }

    let p = positives as f64;
    let u = positive_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Area under the precision-recall curve as average precision: descending
/// score order, tied scores handled as one threshold group, precision
/// weighted by each group's recall increment (step integration, no
/// interpolation).
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scored_input(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "precision-recall needs at least one positive".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite"));

    let total_positives = positives as f64;
    let mut seen_tp = 0u64;
    let mut seen = 0u64;
    let mut recall_prev = 0.0f64;
    let mut ap = 0.0f64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let group_tp =
            order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u64;
        seen_tp += group_tp;
        seen += (end - start) as u64;
        if group_tp > 0 {
            let recall = seen_tp as f64 / total_positives;
            let precision = seen_tp as f64 / seen as f64;
            ap += (recall - recall_prev) * precision;
            recall_prev = recall;
        }
        start = end;
    }
    Ok(ap)
}

/// Mean squared difference between `reconstruction` and `input` over the
/// pixels where `mask` is 0, all channels pooled.
pub fn masked_mse(
    reconstruction: &ImageTensor,
    input: &ImageTensor,
    mask: &[u8],
) -> Result<f64> {
    let (sum, count) = masked_squared_error(reconstruction, input, mask)?;
    if count == 0 {
        return Err(Error::UndefinedMetric(
            "masked reconstruction error needs at least one normal pixel".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Total squared difference over mask-0 pixels and the number of channel
/// elements it covers, for callers pooling across images.
pub fn masked_squared_error(
    reconstruction: &ImageTensor,
    input: &ImageTensor,
    mask: &[u8],
) -> Result<(f64, u64)> {
    if reconstruction.shape() != input.shape() {
        return Err(Error::invalid(format!(
            "reconstruction shape {:?} does not match input shape {:?}",
            reconstruction.shape(),
            input.shape()
        )));
    }
    let (channels, height, width) = input.shape();
    if mask.len() != height * width {
        return Err(Error::invalid(format!(
            "mask length {} does not match {height}x{width}",
            mask.len()
        )));
    }
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::invalid("mask must be binary"));
    }

    let mut sum = 0.0f64;
    let mut count = 0u64;
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] != 0 {
                continue;
            }
            for c in 0..channels {
                let d = reconstruction.get(c, y, x) as f64 - input.get(c, y, x) as f64;
                sum += d * d;
                count += 1;
            }
        }
    }
    Ok((sum, count))
}

/// One image's pixel scores, labels, and pooled reconstruction-error
/// contribution, ready for aggregation.
#[derive(Clone, Debug)]
pub struct ScoredImage {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// Total squared reconstruction error over normal pixels (summed over
    /// channels and repeats).
    pub squared_error_sum: f64,
    /// Channel elements `squared_error_sum` covers.
    pub squared_error_count: u64,
}

/// Aggregates per-image scores into an [`EvalReport`], either pooling all
/// pixels into one ranking (default) or averaging per-image metrics.
pub fn report_from_scored(images: &[ScoredImage], per_image_mean: bool) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let mut per_image = Vec::with_capacity(images.len());
    let mut total_pos = 0u64;
    let mut total_neg = 0u64;
    for (index, img) in images.iter().enumerate() {
        check_scored_input(&img.scores, &img.labels)?;
        let positives = img.labels.iter().filter(|&&l| l == 1).count();
        let negatives = img.labels.len() - positives;
        total_pos += positives as u64;
        total_neg += negatives as u64;
        per_image.push(PerImageEval {
            index,
            positives,
            negatives,
            auroc: auroc(&img.scores, &img.labels).ok(),
            auprc: auprc(&img.scores, &img.labels).ok(),
            masked_mse: (img.squared_error_count > 0)
                .then(|| img.squared_error_sum / img.squared_error_count as f64),
        });
    }

    let (auroc_value, auprc_value, mse_value) = if per_image_mean {
        (
            mean_of_defined(per_image.iter().map(|p| p.auroc), "per-image ranking")?,
            mean_of_defined(per_image.iter().map(|p| p.auprc), "per-image precision-recall")?,
            mean_of_defined(per_image.iter().map(|p| p.masked_mse), "per-image masked error")?,
        )
    } else {
        let scores: Vec<f64> =
            images.iter().flat_map(|img| img.scores.iter().copied()).collect();
        let labels: Vec<u8> =
            images.iter().flat_map(|img| img.labels.iter().copied()).collect();
        let sq_sum: f64 = images.iter().map(|img| img.squared_error_sum).sum();
        let sq_count: u64 = images.iter().map(|img| img.squared_error_count).sum();
        if sq_count == 0 {
            return Err(Error::UndefinedMetric(
                "no normal pixels anywhere in the eval split".into(),
            ));
        }
        (auroc(&scores, &labels)?, auprc(&scores, &labels)?, sq_sum / sq_count as f64)
    };

    Ok(EvalReport {
        auroc: auroc_value,
        auprc: auprc_value,
        masked_mse: mse_value,
        positives: total_pos,
        negatives: total_neg,
        per_image,
    })
}

/// Segments every eval-split patch and aggregates the three metrics.
///
/// Image `i` of the eval split draws reconstruction noise from a stream
/// derived from `(config.seed, i)`, so results do not depend on the order
/// images are processed in, and adding images leaves earlier ones'
/// heatmaps unchanged.
pub fn evaluate_full(
    model: &dyn NoisePredictor,
    dataset: &[LabeledPatch],
    config: &EvalConfig,
) -> Result<EvalOutputs> {
    config.validate()?;
    let eval_set: Vec<&LabeledPatch> =
        dataset.iter().filter(|p| p.split == Split::Eval).collect();
    if eval_set.is_empty() {
        return Err(Error::invalid("dataset has no eval-split patches"));
    }
    let schedule = linear_schedule(config.t_steps, config.beta_start, config.beta_end)?;
    let root = RngState::from_seed(config.seed);

    let evaluated: Vec<(ScoredImage, Heatmap, ImageTensor)> = eval_set
        .par_iter()
        .enumerate()
        .map(|(i, patch)| {
            let rng = root.split_indexed("eval", i as u64);
            let recons = reconstructions(
                &patch.image,
                model,
                &schedule,
                config.noising_fraction,
                config.repeats,
                &rng,
            )?;
            let mut heatmap = average_difference_heatmap(
                &patch.image,
                &recons,
                config.noising_fraction,
            )?;
            heatmap.source_id = format!("eval/{i}");

            let mut sq_sum = 0.0f64;
            let mut sq_count = 0u64;
            for recon in &recons {
                let (s, n) = masked_squared_error(recon, &patch.image, &patch.pixel_mask)?;
                sq_sum += s;
                sq_count += n;
            }
            let scored = ScoredImage {
                scores: heatmap.scores().iter().map(|&s| s as f64).collect(),
                labels: patch.pixel_mask.clone(),
                squared_error_sum: sq_sum,
                squared_error_count: sq_count,
            };
            Ok((scored, heatmap, mean_image(&recons)?))
        })
        .collect::<Result<_>>()?;

    let scored: Vec<ScoredImage> = evaluated.iter().map(|(s, _, _)| s.clone()).collect();
    let report = report_from_scored(&scored, config.per_image_mean)?;
    let mut heatmaps = Vec::with_capacity(evaluated.len());
    let mut recons = Vec::with_capacity(evaluated.len());
    for (_, h, r) in evaluated {
        heatmaps.push(h);
        recons.push(r);
    }
    Ok(EvalOutputs { report, heatmaps, reconstructions: recons })
}

/// [`evaluate_full`] without the image artifacts.
pub fn evaluate(
    model: &dyn NoisePredictor,
    dataset: &[LabeledPatch],
    config: &EvalConfig,
) -> Result<EvalReport> {
    Ok(evaluate_full(model, dataset, config)?.report)
}

fn mean_image(images: &[ImageTensor]) -> Result<ImageTensor> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to average"))?;
    let mut sums = vec![0.0f64; first.len()];
    for img in images {
        for (acc, v) in sums.iter_mut().zip(img.to_f64()) {
            *acc += v;
        }
    }
    let n = images.len() as f64;
    for v in &mut sums {
        *v /= n;
    }
    first.from_f64_like(&sums)
}

fn mean_of_defined(
    values: impl Iterator<Item = Option<f64>>,
    what: &str,
) -> Result<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "{what} is undefined on every image"
        )));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

fn check_scored_input(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores against {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::invalid("empty score list"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be binary"));
    }
    Ok(())
}
