//! The forward (noising) and reverse (denoising) diffusion processes.
//!
//! Timesteps are 1-indexed: t runs over {1, …, T}. The forward process
//! draws x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε with ε ~ N(0, I); one reverse step
//! computes
//!
//! x_{t−1} = (x_t − (1−α_t)/√(1−ᾱ_t) · ε̂) / √α_t + σ_t·z
//!
//! with z ~ N(0, I) for t > 1 and no noise at the final step t = 1, where
//! the RNG is deliberately not consumed. All per-element arithmetic runs
//! in f64 and rounds to the f32 tensor storage once per step.

use crate::core::{gaussian_like, ImageTensor, RngState};
use crate::model::NoisePredictor;
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// One training example for noise prediction: the noised image, the exact
/// noise that produced it, and the timestep.
#[derive(Clone, Debug)]
pub struct NoisySample {
    pub x_t: ImageTensor,
    pub eps: ImageTensor,
    pub t: usize,
}

/// Applies the forward process to `x0` at timestep `t`, drawing the noise
/// from `rng`.
pub fn forward_noise(
    x0: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut RngState,
) -> Result<NoisySample> {
    schedule.check_t(t)?;
    let eps = gaussian_like(x0.shape(), rng)?;
    let x_t = forward_noise_with_eps(x0, &eps, t, schedule)?;
    Ok(NoisySample { x_t, eps, t })
}

/// The forward process with caller-supplied noise:
/// x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε.
pub fn forward_noise_with_eps(
    x0: &ImageTensor,
    eps: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_t(t)?;
    x0.scaled_sum(schedule.sqrt_alpha_bar(t), eps, schedule.sqrt_one_minus_alpha_bar(t))
}

/// One reverse step from x_t to x_{t−1} given the noise estimate `eps_hat`,
/// drawing the step noise z from `rng` for t > 1. At t = 1 the step is
/// deterministic and `rng` is not touched, so RNG streams stay aligned
/// whether or not a trajectory ends at t = 1.
pub fn reverse_step(
    x_t: &ImageTensor,
    eps_hat: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut RngState,
) -> Result<ImageTensor> {
    schedule.check_t(t)?;
    let z = if t > 1 { Some(gaussian_like(x_t.shape(), rng)?) } else { None };
    reverse_step_with_z(x_t, eps_hat, t, schedule, z.as_ref())
}

/// [`reverse_step`] with caller-supplied step noise. `z` must be present
/// exactly when t > 1; the mismatch is rejected rather than silently
/// ignored so misuse of the deterministic final step cannot hide.
pub fn reverse_step_with_z(
    x_t: &ImageTensor,
    eps_hat: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    z: Option<&ImageTensor>,
) -> Result<ImageTensor> {
    schedule.check_t(t)?;
    x_t.check_same_shape(eps_hat)?;
    match (t > 1, z) {
        (true, None) => {
            return Err(Error::invalid(format!("reverse step at t = {t} requires step noise z")))
        }
        (false, Some(_)) => {
            return Err(Error::invalid("reverse step at t = 1 is deterministic; z must be None"))
        }
        _ => {}
    }
    if let Some(z) = z {
        x_t.check_same_shape(z)?;
    }

    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let coef = (1.0 - schedule.alpha(t)) / schedule.sqrt_one_minus_alpha_bar(t);
    let sigma = schedule.sigma(t);

    let mut out = vec![0.0f64; x_t.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let x = f64::from(x_t.data()[i]);
        let e = f64::from(eps_hat.data()[i]);
        let mut v = (x - coef * e) * inv_sqrt_alpha;
        if let Some(z) = z {
            v += sigma * f64::from(z.data()[i]);
        }
        *o = v;
    }
    x_t.from_f64_like(&out)
}

/// Draws x_T ~ N(0, I) of the given shape and runs the full reverse chain
/// down to x₀.
pub fn sample(
    model: &dyn NoisePredictor,
    shape: (usize, usize, usize),
    schedule: &NoiseSchedule,
    rng: &mut RngState,
) -> Result<ImageTensor> {
    let mut x = gaussian_like(shape, rng)?;
    for t in (1..=schedule.t_steps()).rev() {
        x = denoise_once(model, &x, t, schedule, rng)?;
    }
    Ok(x)
}

/// Number of forward steps corresponding to a fraction of the schedule:
/// round(fraction·T) clamped into [1, T].
pub fn noising_steps(fraction: f64, t_steps: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "noising fraction must lie in (0, 1], got {fraction}"
        )));
    }
    Ok(((fraction * t_steps as f64).round() as usize).clamp(1, t_steps))
}

/// Partially noises `x0` for `round(fraction·T)` steps, then denoises back
/// with the model. A clean in-distribution image survives the round trip;
/// structure the model never learned does not, which is what the
/// segmentation stage exploits.
pub fn reconstruct(
    model: &dyn NoisePredictor,
    x0: &ImageTensor,
    schedule: &NoiseSchedule,
    fraction: f64,
    rng: &mut RngState,
) -> Result<ImageTensor> {
    let t_star = noising_steps(fraction, schedule.t_steps())?;
    let mut x = forward_noise(x0, t_star, schedule, rng)?.x_t;
    for t in (1..=t_star).rev() {
        x = denoise_once(model, &x, t, schedule, rng)?;
    }
    Ok(x)
}

/// Predicts the noise at timestep t and applies one reverse step.
fn denoise_once(
    model: &dyn NoisePredictor,
    x: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut RngState,
) -> Result<ImageTensor> {
    let pred = model.forward(x, t)?;
    let eps_hat = x.from_f64_like(&pred)?;
    reverse_step(x, &eps_hat, t, schedule, rng)
}
