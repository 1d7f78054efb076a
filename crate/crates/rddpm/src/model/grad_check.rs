//! Central-difference validation of analytic parameter gradients.

use crate::diffusion::NoisySample;
use crate::losses::{
    batch_gradient, loss_on_selection, residuals, RobustLossSpec,
};
use crate::model::NoisePredictor;
use crate::{Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    /// max_j |fd_j − g_j| / max(max_j |g_j|, 1e−6).
    pub max_error: f64,
    /// Largest absolute disagreement before normalization.
    pub max_abs_diff: f64,
    /// Largest analytic gradient magnitude, the normalization scale.
    pub grad_scale: f64,
    pub params_checked: usize,
}

/// Default central-difference step in parameter space.
pub const DEFAULT_FD_STEP: f64 = 1e-3;

/// Parameter count above which the exhaustive check is refused; the cost
/// grows as 2·P forward passes per batch element.
const MAX_CHECKED_PARAMS: usize = 10_000;

/// Gradient floor for the scale-relative error, so an all-zero gradient
/// does not divide by zero.
const SCALE_FLOOR: f64 = 1e-6;

/// Checks the model's analytic parameter gradient of `loss` on `batch`
/// against central differences with step [`DEFAULT_FD_STEP`], returning
/// the worst scale-relative disagreement.
///
/// The reported error is max_j |fd_j − g_j| normalized by the largest
/// analytic component (not per-component relative error, which is
/// dominated by finite-difference noise wherever a single gradient entry
/// is incidentally tiny). Parameters are f32, so each probe uses the
/// effective step that survives rounding, measured as
/// f64(θ_j + h) − f64(θ_j − h) after the f32 round-trip. Under LTS the
/// trimmed-sample selection is frozen at the unperturbed parameters, since
/// the selection is a constant under differentiation and reselecting
/// inside the probe would make the probed function discontinuous.
///
/// The model's parameters are restored bit-for-bit before returning.
pub fn grad_check(
    model: &mut dyn NoisePredictor,
    batch: &[NoisySample],
    loss: &RobustLossSpec,
) -> Result<GradCheckReport> {
    grad_check_with_step(model, batch, loss, DEFAULT_FD_STEP)
}

/// [`grad_check`] with an explicit central-difference step.
pub fn grad_check_with_step(
    model: &mut dyn NoisePredictor,
    batch: &[NoisySample],
    loss: &RobustLossSpec,
    step: f64,
) -> Result<GradCheckReport> {
    loss.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("batch must be nonempty"));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let param_count = model.param_count();
    if param_count == 0 {
        return Err(Error::invalid("model has no parameters to check"));
    }
    if param_count >= MAX_CHECKED_PARAMS {
        return Err(Error::invalid(format!(
            "refusing to finite-difference {param_count} parameters \
             (limit {MAX_CHECKED_PARAMS}); use a smaller model"
        )));
    }

    let analytic = batch_gradient(batch, model, loss)?;
    let frozen_selection = analytic.selected.clone();
    let original: Vec<f32> = model.params().to_vec();

    let mut work = original.clone();
    let probe = |model: &mut dyn NoisePredictor,
                 work: &mut Vec<f32>,
                 j: usize,
                 value: f32|
     -> Result<f64> {
        work[j] = value;
        model.set_params(work)?;
        let res = residuals(batch, model)?;
        loss_on_selection(loss, &res, &frozen_selection)
    };

    // Run the sweep in a closure so the parameter restore below happens on
    // every exit path.
    let sweep = |model: &mut dyn NoisePredictor, work: &mut Vec<f32>| -> Result<f64> {
        let mut max_abs_diff = 0.0f64;
        for j in 0..param_count {
            let base = original[j];
            let plus = (f64::from(base) + step) as f32;
            let minus = (f64::from(base) - step) as f32;
            let h_eff = f64::from(plus) - f64::from(minus);
            if h_eff <= 0.0 {
                return Err(Error::invalid(format!(
                    "parameter {j} (value {base}) absorbs the step {step} in f32"
                )));
            }
            let loss_plus = probe(model, work, j, plus)?;
            let loss_minus = probe(model, work, j, minus)?;
            work[j] = base;
            let fd = (loss_plus - loss_minus) / h_eff;
            max_abs_diff = max_abs_diff.max((fd - analytic.param_grad[j]).abs());
        }
        Ok(max_abs_diff)
    };
    let swept = sweep(model, &mut work);
    model.set_params(&original)?;
    let max_abs_diff = swept?;

    let grad_scale = analytic.param_grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    Ok(GradCheckReport {
        max_error: max_abs_diff / grad_scale.max(SCALE_FLOOR),
        max_abs_diff,
        grad_scale,
        params_checked: param_count,
    })
}
