//! Noise-schedule bookkeeping: per-timestep β, α, ᾱ, and σ tables.

use crate::{Error, Result};

/// Precomputed per-timestep coefficients for a T-step diffusion chain.
///
/// Timesteps are 1-indexed: `t` ranges over `1..=T`, and accessors take that
/// convention (internally tables are stored at offset `t - 1`). All tables
/// are double precision; the running product for ᾱ is exact enough that
/// `ᾱ_t = α_t · ᾱ_{t-1}` holds to 1e-12 at every step.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    t_steps: usize,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

/// Builds a linear schedule: β_t interpolates from `beta_start` at t = 1 to
/// `beta_end` at t = T. The reverse-step noise scale is σ_t = sqrt(β_t).
pub fn linear_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(Error::invalid("schedule needs at least one timestep"));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "beta bounds must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }

    let mut betas = Vec::with_capacity(t_steps);
    if t_steps == 1 {
        betas.push(beta_start);
    } else {
        let span = beta_end - beta_start;
        let denom = (t_steps - 1) as f64;
        for t in 1..=t_steps {
            betas.push(beta_start + (t - 1) as f64 / denom * span);
        }
    }

    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut product = 1.0f64;
    for &a in &alphas {
        product *= a;
        alpha_bars.push(product);
    }
    let sigmas: Vec<f64> = betas.iter().map(|b| b.sqrt()).collect();

    Ok(NoiseSchedule { t_steps, beta_start, beta_end, betas, alphas, alpha_bars, sigmas })
}

impl NoiseSchedule {
    /// Number of diffusion steps T.
    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    /// The `(T, beta_start, beta_end)` triple that reconstructs this
    /// schedule; checkpoints store this instead of the derived tables.
    pub fn triple(&self) -> (usize, f64, f64) {
        (self.t_steps, self.beta_start, self.beta_end)
    }

    /// Validates a 1-indexed timestep.
    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_steps {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.t_steps
            )));
        }
        Ok(())
    }

    /// β_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// α_t = 1 - β_t.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t = ∏_{i≤t} α_i.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Reverse-step noise scale σ_t.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// sqrt(ᾱ_t), the signal coefficient of the closed-form noising map.
    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1].sqrt()
    }

    /// sqrt(1-ᾱ_t), the noise coefficient of the closed-form noising map.
    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t - 1]).sqrt()
    }
}
