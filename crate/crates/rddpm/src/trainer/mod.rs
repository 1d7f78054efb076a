//! The training loop: per-epoch shuffling, per-sample noising, robust-loss
//! gradients, optimizer updates, and checkpoint/loss-history artifacts.

mod adam;
mod checkpoint;

pub use adam::{optimizer_step, AdamState, EPSILON, MOMENT1_DECAY, MOMENT2_DECAY};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::core::RngState;
use crate::corruption::{LabeledPatch, Split};
use crate::diffusion::forward_noise;
use crate::losses::{batch_gradient, RobustLossSpec};
use crate::model::NoisePredictor;
use crate::schedule::linear_schedule;
use crate::{Error, Result};

/// Full description of a training run. Checkpoints embed it so a run can
/// be reproduced from the artifact alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Passes over the training split.
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    /// Samples per optimizer step. The final batch of an epoch keeps
    /// whatever remainder the shuffle leaves, so no sample is dropped.
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub loss: RobustLossSpec,
    /// Diffusion chain length T.
    #[serde(default = "defaults::t_steps")]
    pub t_steps: usize,
    #[serde(default = "defaults::beta_start")]
    pub beta_start: f64,
    #[serde(default = "defaults::beta_end")]
    pub beta_end: f64,
    #[serde(default)]
    pub seed: u64,
    /// Epochs between parameter snapshots; 0 keeps only the final state.
    #[serde(default)]
    pub checkpoint_interval: usize,
}

mod defaults {
    pub fn epochs() -> usize {
        10
    }
    pub fn batch_size() -> usize {
        4
    }
    pub fn learning_rate() -> f64 {
        1e-4
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

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            loss: RobustLossSpec::default(),
            t_steps: defaults::t_steps(),
            beta_start: defaults::beta_start(),
            beta_end: defaults::beta_end(),
            seed: 0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("training needs at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        self.loss.validate()?;
        // Schedule construction re-checks these; failing early gives the
        // caller one place to catch a bad config.
        linear_schedule(self.t_steps, self.beta_start, self.beta_end)?;
        Ok(())
    }
}

/// One optimizer step's outcome, as recorded in the loss-history CSV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Global step index, 0-based.
    pub step: u64,
    /// Epoch the step belongs to, 1-based.
    pub epoch: usize,
    pub loss: f64,
    /// Samples that contributed gradient (the whole batch except under
    /// trimmed losses, which keep a configured fraction).
    pub kept_samples: usize,
}

/// Trains `model` on the training-split patches of `dataset`.
///
/// Each step draws the next shuffled batch, samples a timestep and a noise
/// realization independently per sample, and applies one optimizer update
/// from the configured loss. Runs with equal seed, config, dataset, and
/// initial parameters produce bit-identical loss histories and parameter
/// trajectories.
pub fn train(
    dataset: &[LabeledPatch],
    config: &TrainConfig,
    model: &mut dyn NoisePredictor,
) -> Result<Vec<StepRecord>> {
    train_with_snapshots(dataset, config, model, |_, _, _| Ok(()))
}

/// [`train`], invoking `on_epoch(epoch, model, history_so_far)` after each
/// completed epoch so callers can write checkpoints or progress output.
pub fn train_with_snapshots(
    dataset: &[LabeledPatch],
    config: &TrainConfig,
    model: &mut dyn NoisePredictor,
    mut on_epoch: impl FnMut(usize, &dyn NoisePredictor, &[StepRecord]) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    config.validate()?;
    let train_set: Vec<&LabeledPatch> =
        dataset.iter().filter(|p| p.split == Split::Train).collect();
    if train_set.is_empty() {
        return Err(Error::invalid("dataset has no training-split patches"));
    }
    let schedule = linear_schedule(config.t_steps, config.beta_start, config.beta_end)?;
    let root = RngState::from_seed(config.seed);
    let mut order_rng = root.split("batch_order");
    let mut noise_rng = root.split("noising");

    let mut state = AdamState::new(model.param_count(), config.learning_rate)?;
    let mut history = Vec::new();
    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    let mut step: u64 = 0;

    for epoch in 1..=config.epochs {
        order_rng.shuffle(&mut indices);
        for chunk in indices.chunks(config.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let t = noise_rng.uniform_inclusive(1, config.t_steps);
                batch.push(forward_noise(&train_set[i].image, t, &schedule, &mut noise_rng)?);
            }
            let grad = batch_gradient(&batch, model, &config.loss)?;
            if !grad.loss.is_finite() {
                return Err(Error::NanLoss {
                    step,
                    loss_kind: config.loss.name().to_string(),
                    timesteps: batch.iter().map(|s| s.t).collect(),
                });
            }
            let mut params = model.params().to_vec();
            optimizer_step(&mut params, &grad.param_grad, &mut state)?;
            model.set_params(&params)?;
            history.push(StepRecord {
                step,
                epoch,
                loss: grad.loss,
                kept_samples: grad.selected.len(),
            });
            step += 1;
        }
        on_epoch(epoch, &*model, &history)?;
    }
    Ok(history)
}

/// Writes the per-step loss history as CSV with columns
/// `step,epoch,loss,kept_samples`.
pub fn write_loss_history(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in records {
        writer.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::ImageTensor;
    use crate::corruption::{generate_texture_dataset, TextureParams};
    use crate::diffusion::NoisySample;
    use crate::losses::batch_gradient;
    use crate::model::LinearPredictor;

    const SHAPE: (usize, usize, usize) = (1, 4, 4);

    fn patches(n: usize, seed: u64) -> Vec<LabeledPatch> {
        let params = TextureParams { size: 4, ..TextureParams::default() };
        generate_texture_dataset(n, &params, &RngState::from_seed(seed)).unwrap()
    }

    fn fresh_model(seed: u64) -> LinearPredictor {
        LinearPredictor::new(SHAPE, &mut RngState::from_seed(seed)).unwrap()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            loss: RobustLossSpec::L2,
            t_steps: 50,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn param_bits(model: &dyn NoisePredictor) -> Vec<u32> {
        model.params().iter().map(|p| p.to_bits()).collect()
    }

    #[test]
    fn same_seed_same_config_is_bit_identical() {
        let data = patches(6, 21);
        let config = quick_config();
        let run = || {
            let mut model = fresh_model(3);
            let history = train(&data, &config, &mut model).unwrap();
            (history, param_bits(&model))
        };
        let (ha, pa) = run();
        let (hb, pb) = run();
        assert_eq!(pa, pb);
        assert_eq!(ha.len(), hb.len());
        for (a, b) in ha.iter().zip(&hb) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.kept_samples, b.kept_samples);
        }
    }

    #[test]
    fn full_keep_trimming_matches_plain_l2_trajectory_bitwise() {
        let data = patches(10, 22);
        let mut config_l2 = quick_config();
        config_l2.epochs = 3;
        let mut config_lts = config_l2.clone();
        config_lts.loss = RobustLossSpec::Lts { lambda: 1.0 };

        let run = |config: &TrainConfig| {
            let mut model = fresh_model(7);
            let mut per_epoch: Vec<Vec<u32>> = Vec::new();
            let history =
                train_with_snapshots(&data, config, &mut model, |_, m, _| {
                    per_epoch.push(param_bits(m));
                    Ok(())
                })
                .unwrap();
            (history, per_epoch)
        };
        let (h2, p2) = run(&config_l2);
        let (hl, pl) = run(&config_lts);

        assert_eq!(p2, pl, "parameter trajectories diverged");
        let l2_bits: Vec<u64> = h2.iter().map(|r| r.loss.to_bits()).collect();
        let lts_bits: Vec<u64> = hl.iter().map(|r| r.loss.to_bits()).collect();
        assert_eq!(l2_bits, lts_bits);
        for (a, b) in h2.iter().zip(&hl) {
            assert_eq!(a.kept_samples, b.kept_samples);
        }
    }

    #[test]
    fn huge_corner_huber_gradient_is_exactly_half_of_l2() {
        // At any shared parameter point, a Huber corner far beyond every
        // residual keeps all elements on the quadratic branch, where its
        // loss and gradient are exactly half of plain squared error —
        // halving commutes bitwise with every downstream float operation
        // that is linear in the upstream gradient.
        let data = patches(8, 23);
        let config = quick_config();
        let schedule =
            linear_schedule(config.t_steps, config.beta_start, config.beta_end).unwrap();
        let mut model = fresh_model(5);
        let mut state = AdamState::new(model.param_count(), config.learning_rate).unwrap();
        let mut rng = RngState::from_seed(31);
        let l2 = RobustLossSpec::L2;
        let huber = RobustLossSpec::Huber { delta: 1e6 };

        for _ in 0..20 {
            let mut batch = Vec::new();
            for _ in 0..4 {
                let i = rng.uniform_index(data.len());
                let t = rng.uniform_inclusive(1, config.t_steps);
                batch.push(forward_noise(&data[i].image, t, &schedule, &mut rng).unwrap());
            }
            let g2 = batch_gradient(&batch, &model, &l2).unwrap();
            let gh = batch_gradient(&batch, &model, &huber).unwrap();
            assert_eq!(gh.loss.to_bits(), (0.5 * g2.loss).to_bits());
            for (a, b) in gh.param_grad.iter().zip(&g2.param_grad) {
                assert_eq!(a.to_bits(), (0.5 * b).to_bits());
                assert!(a.signum() == b.signum() || *a == 0.0);
            }
            // Advance along the squared-error trajectory.
            let mut params = model.params().to_vec();
            optimizer_step(&mut params, &g2.param_grad, &mut state).unwrap();
            model.set_params(&params).unwrap();
        }
    }

    #[test]
    fn constant_image_training_reduces_loss() {
        let image = ImageTensor::from_data(1, 4, 4, vec![0.3; 16]).unwrap();
        let data = vec![LabeledPatch::normal(image, Split::Train)];
        let config = TrainConfig {
            epochs: 2000,
            batch_size: 1,
            learning_rate: 1e-3,
            loss: RobustLossSpec::L2,
            t_steps: 50,
            seed: 13,
            ..TrainConfig::default()
        };
        let mut model = fresh_model(9);
        let history = train(&data, &config, &mut model).unwrap();
        assert_eq!(history.len(), 2000);

        let first = history[0].loss;
        let tail = &history[history.len() - 100..];
        let tail_mean = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
        assert!(
            tail_mean < first,
            "loss failed to decrease: started {first}, settled {tail_mean}"
        );
    }

    #[test]
    fn partial_final_batch_is_kept_with_trim_count_recomputed() {
        let data = patches(5, 24);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            loss: RobustLossSpec::Lts { lambda: 0.5 },
            t_steps: 20,
            seed: 17,
            ..TrainConfig::default()
        };
        let mut model = fresh_model(11);
        let history = train(&data, &config, &mut model).unwrap();

        // 5 samples in batches of 4 → steps of size 4 then 1, each epoch.
        assert_eq!(history.len(), 4);
        let kept: Vec<usize> = history.iter().map(|r| r.kept_samples).collect();
        // floor(0.5·4) = 2 kept on full batches; the singleton batch keeps
        // its one sample (trimming never empties a batch).
        assert_eq!(kept, vec![2, 1, 2, 1]);
        let epochs: Vec<usize> = history.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![1, 1, 2, 2]);
        let steps: Vec<u64> = history.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 1, 2, 3]);
    }

    #[test]
    fn eval_split_patches_never_influence_training() {
        let train_only = patches(6, 25);
        // Interleave eval-tagged patches; if the loop ever read one, the
        // batch order or contents would change and the histories diverge.
        let mut mixed = Vec::new();
        for (i, p) in patches(9, 26).into_iter().enumerate() {
            if i % 3 == 0 {
                let mut eval = p;
                eval.split = Split::Eval;
                mixed.push(eval);
            }
        }
        let mut combined = Vec::new();
        for (i, p) in train_only.iter().enumerate() {
            if i % 2 == 0 {
                combined.push(mixed[i / 2].clone());
            }
            combined.push(p.clone());
        }
        assert_eq!(combined.len(), 9);

        let config = quick_config();
        let mut model_a = fresh_model(13);
        let ha = train(&train_only, &config, &mut model_a).unwrap();
        let mut model_b = fresh_model(13);
        let hb = train(&combined, &config, &mut model_b).unwrap();

        assert_eq!(param_bits(&model_a), param_bits(&model_b));
        let la: Vec<u64> = ha.iter().map(|r| r.loss.to_bits()).collect();
        let lb: Vec<u64> = hb.iter().map(|r| r.loss.to_bits()).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn eval_only_dataset_is_rejected() {
        let mut data = patches(4, 27);
        for p in &mut data {
            p.split = Split::Eval;
        }
        let config = quick_config();
        let mut model = fresh_model(15);
        assert!(train(&data, &config, &mut model).is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_step_context() {
        let data = patches(6, 28);
        let config = quick_config();
        let mut model = fresh_model(17);
        let mut poisoned = model.params().to_vec();
        poisoned[0] = f32::NAN;
        model.set_params(&poisoned).unwrap();

        match train(&data, &config, &mut model) {
            Err(Error::NanLoss { step, loss_kind, timesteps }) => {
                assert_eq!(step, 0);
                assert_eq!(loss_kind, "l2");
                assert_eq!(timesteps.len(), 4);
                assert!(timesteps.iter().all(|&t| (1..=50).contains(&t)));
            }
            other => panic!("expected a non-finite-loss abort, got {other:?}"),
        }
    }

    #[test]
    fn trimmed_samples_contribute_nothing_to_the_update() {
        // Replaying a step with the trimmed samples deleted (selection
        // fixed by construction: the kept samples are strictly closer to
        // their targets) must produce the same parameter update.
        let data = patches(6, 29);
        let schedule = linear_schedule(40, 0.001, 0.02).unwrap();
        let model = fresh_model(19);
        let mut rng = RngState::from_seed(41);

        let mut batch: Vec<NoisySample> = data
            .iter()
            .map(|p| forward_noise(&p.image, rng.uniform_inclusive(1, 40), &schedule, &mut rng))
            .collect::<Result<_>>()
            .unwrap();
        // Blow up two samples' targets so trimming drops exactly those.
        for i in [1, 4] {
            let bumped: Vec<f64> = batch[i].eps.to_f64().iter().map(|v| v + 50.0).collect();
            batch[i].eps = batch[i].eps.from_f64_like(&bumped).unwrap();
        }

        let spec = RobustLossSpec::Lts { lambda: 0.67 };
        let full = batch_gradient(&batch, &model, &spec).unwrap();
        assert_eq!(full.selected, vec![0, 2, 3, 5]);

        let kept_batch: Vec<NoisySample> =
            full.selected.iter().map(|&i| batch[i].clone()).collect();
        let replay = batch_gradient(&kept_batch, &model, &RobustLossSpec::L2).unwrap();

        let state = AdamState::new(model.param_count(), 1e-3).unwrap();
        let mut params_full = model.params().to_vec();
        let mut state_full = state.clone();
        optimizer_step(&mut params_full, &full.param_grad, &mut state_full).unwrap();
        let mut params_replay = model.params().to_vec();
        let mut state_replay = state.clone();
        optimizer_step(&mut params_replay, &replay.param_grad, &mut state_replay).unwrap();

        for (a, b) in params_full.iter().zip(&params_replay) {
            assert!((*a as f64 - *b as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn snapshot_callback_sees_every_epoch() {
        let data = patches(5, 30);
        let mut config = quick_config();
        config.epochs = 3;
        let mut model = fresh_model(23);
        let mut seen = Vec::new();
        train_with_snapshots(&data, &config, &mut model, |epoch, _, history| {
            seen.push((epoch, history.len()));
            Ok(())
        })
        .unwrap();
        // 5 samples, batch 4 → 2 steps per epoch.
        assert_eq!(seen, vec![(1, 2), (2, 4), (3, 6)]);
    }

    #[test]
    fn loss_history_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let data = patches(5, 31);
        let config = quick_config();
        let mut model = fresh_model(25);
        let history = train(&data, &config, &mut model).unwrap();
        write_loss_history(&path, &history).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,epoch,loss,kept_samples\n"));

        let mut reader = csv::Reader::from_path(&path).unwrap();
        let parsed: Vec<StepRecord> =
            reader.deserialize().collect::<std::result::Result<_, _>>().unwrap();
        assert_eq!(parsed.len(), history.len());
        for (a, b) in parsed.iter().zip(&history) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.kept_samples, b.kept_samples);
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: f64::INFINITY, ..ok.clone() }
            .validate()
            .is_err());
        assert!(TrainConfig { t_steps: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { beta_start: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { beta_end: 1.5, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { loss: RobustLossSpec::Huber { delta: -1.0 }, ..ok.clone() }
            .validate()
            .is_err());
        assert!(TrainConfig { loss: RobustLossSpec::Lts { lambda: 0.0 }, ..ok }
            .validate()
            .is_err());
    }

    #[test]
    fn config_json_defaults_fill_missing_fields() {
        let parsed: TrainConfig =
            serde_json::from_str(r#"{"seed": 5, "loss": {"kind": "huber", "delta": 0.3}}"#)
                .unwrap();
        assert_eq!(parsed.seed, 5);
        assert_eq!(parsed.loss, RobustLossSpec::Huber { delta: 0.3 });
        assert_eq!(parsed.epochs, 10);
        assert_eq!(parsed.batch_size, 4);
        assert_eq!(parsed.learning_rate, 1e-4);
        assert_eq!(parsed.t_steps, 1000);
        assert_eq!(parsed.beta_start, 0.001);
        assert_eq!(parsed.beta_end, 0.02);
        assert_eq!(parsed.checkpoint_interval, 0);
    }
}
