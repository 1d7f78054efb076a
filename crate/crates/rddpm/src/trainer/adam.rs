//! Adaptive moment-based optimizer shared by every training run.

use crate::{Error, Result};

/// Exponential decay rate of the first-moment (mean) accumulator.
pub const MOMENT1_DECAY: f64 = 0.9;
/// Exponential decay rate of the second-moment (variance) accumulator.
pub const MOMENT2_DECAY: f64 = 0.999;
/// Guard added to the square root of the second moment in the denominator.
pub const EPSILON: f64 = 1e-8;

/// Optimizer state: per-parameter moment accumulators plus the step count
/// driving bias correction.
///
/// All accumulation runs in double precision; each parameter rounds to
/// `f32` exactly once per update. Bias-correction factors are maintained
/// as running products rather than recomputed powers, so the update
/// sequence is a fixed chain of primitive float operations and two runs
/// from equal state are bit-identical.
#[derive(Clone, Debug)]
pub struct AdamState {
    learning_rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
    decay1_power: f64,
    decay2_power: f64,
}

impl AdamState {
    /// Fresh zeroed state for `param_count` parameters.
    pub fn new(param_count: usize, learning_rate: f64) -> Result<Self> {
        if param_count == 0 {
            return Err(Error::invalid("optimizer needs at least one parameter"));
        }
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive and finite, got {learning_rate}"
            )));
        }
        Ok(AdamState {
            learning_rate,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            steps: 0,
            decay1_power: 1.0,
            decay2_power: 1.0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// One optimizer update: `θ ← θ − lr · m̂ / (√v̂ + ε)` with bias-corrected
/// moment estimates `m̂`, `v̂`.
///
/// Deterministic given state. From fresh state a zero gradient leaves the
/// parameters bit-identical (both moments stay zero, so the step is an
/// exact no-op).
pub fn optimizer_step(params: &mut [f32], grad: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != state.m.len() || grad.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "optimizer shape mismatch: {} params, {} gradient entries, state sized {}",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    state.steps += 1;
    state.decay1_power *= MOMENT1_DECAY;
    state.decay2_power *= MOMENT2_DECAY;
    let bias1 = 1.0 - state.decay1_power;
    let bias2 = 1.0 - state.decay2_power;

    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = MOMENT1_DECAY * state.m[i] + (1.0 - MOMENT1_DECAY) * g;
        state.v[i] = MOMENT2_DECAY * state.v[i] + (1.0 - MOMENT2_DECAY) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        let updated = params[i] as f64 - state.learning_rate * m_hat / (v_hat.sqrt() + EPSILON);
        params[i] = updated as f32;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_hand_computation() {
        // After one step from zero state the bias corrections cancel the
        // moment decay exactly in closed form: m̂ = g, v̂ = g², so
        // θ' = θ − lr·g/(|g| + ε).
        let mut params = vec![1.0f32, -0.5];
        let grad = vec![2.0f64, -3.0];
        let mut state = AdamState::new(2, 1e-4).unwrap();
        optimizer_step(&mut params, &grad, &mut state).unwrap();

        let expected0 = 1.0f64 - 1e-4 * (2.0 / (2.0 + EPSILON));
        let expected1 = -0.5f64 - 1e-4 * (-3.0 / (3.0 + EPSILON));
        assert!((params[0] as f64 - expected0).abs() < 1e-7, "{} vs {expected0}", params[0]);
        assert!((params[1] as f64 - expected1).abs() < 1e-7, "{} vs {expected1}", params[1]);
        // Direction: both moves oppose the gradient sign.
        assert!(params[0] < 1.0);
        assert!(params[1] > -0.5);
        assert_eq!(state.steps(), 1);
    }

    #[test]
    fn zero_gradient_from_fresh_state_changes_nothing() {
        let original = vec![0.25f32, -1.5, 3.0e-3];
        let mut params = original.clone();
        let mut state = AdamState::new(3, 1e-2).unwrap();
        for _ in 0..5 {
            optimizer_step(&mut params, &[0.0, 0.0, 0.0], &mut state).unwrap();
        }
        let bits: Vec<u32> = params.iter().map(|p| p.to_bits()).collect();
        let want: Vec<u32> = original.iter().map(|p| p.to_bits()).collect();
        assert_eq!(bits, want);
    }

    #[test]
    fn constant_gradient_reaches_sign_step_size() {
        // With a constant gradient g the corrected moments converge to g and
        // g², so the per-step move approaches lr·sign(g) regardless of |g|.
        for (g, direction) in [(0.7f64, -1.0f64), (-0.002, 1.0)] {
            let lr = 1e-3;
            let mut params = vec![0.0f32];
            let mut state = AdamState::new(1, lr).unwrap();
            let mut prev = params[0] as f64;
            let mut last_delta = 0.0;
            for _ in 0..2000 {
                optimizer_step(&mut params, &[g], &mut state).unwrap();
                last_delta = params[0] as f64 - prev;
                prev = params[0] as f64;
            }
            let expected = direction * lr;
            assert!(
                (last_delta - expected).abs() < 0.01 * lr,
                "gradient {g}: step {last_delta}, expected {expected}"
            );
        }
    }

    #[test]
    fn update_is_deterministic_given_state() {
        let grads = [vec![0.3f64, -0.9], vec![-0.1, 0.4], vec![2.5, 2.5]];
        let run = || {
            let mut params = vec![0.5f32, 0.5];
            let mut state = AdamState::new(2, 3e-4).unwrap();
            for g in &grads {
                optimizer_step(&mut params, g, &mut state).unwrap();
            }
            params.iter().map(|p| p.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_construction_and_shapes() {
        assert!(AdamState::new(0, 1e-4).is_err());
        assert!(AdamState::new(4, 0.0).is_err());
        assert!(AdamState::new(4, -1e-4).is_err());
        assert!(AdamState::new(4, f64::NAN).is_err());

        let mut state = AdamState::new(2, 1e-4).unwrap();
        let mut params = vec![0.0f32, 0.0];
        assert!(optimizer_step(&mut params, &[1.0], &mut state).is_err());
        let mut short = vec![0.0f32];
        assert!(optimizer_step(&mut short, &[1.0, 1.0], &mut state).is_err());
    }
}
