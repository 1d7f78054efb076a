//! Per-sample residuals and the training losses: L2, L1, Huber, and least
//! trimmed squares (LTS), each with exact gradients with respect to the
//! model's predictions.
//!
//! The residual of sample i is r_i = ε_i − prediction_i. All losses average
//! over residual elements; gradients are reported per sample with respect
//! to the prediction, so dLoss/dPrediction = −dLoss/dResidual.
//!
//! Two exact algebraic relations are preserved at the bit level and tests
//! rely on them:
//! - LTS with λ = 1 selects every sample and routes through the same
//!   subset-restricted L2 code path as the plain L2 loss, so the two are
//!   bit-identical.
//! - When every |r| ≤ δ, the Huber loss and gradient are exactly half of
//!   L2's, because halving and doubling are exact floating-point scalings
//!   and summation order is shared.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core::vec_add_assign;
use crate::diffusion::NoisySample;
use crate::model::NoisePredictor;
use crate::{Error, Result};

/// Tagged choice of training loss.
///
/// `delta` is the Huber corner on the [-1, 1] intensity scale (default
/// 0.2); `lambda` ∈ (0, 1] is the kept fraction of each batch under LTS.
/// L1 exists as an explicit mode because the Huber limit δ → 0 degenerates
/// to an identically zero loss rather than to L1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RobustLossSpec {
    L2,
    L1,
    Huber { delta: f64 },
    Lts { lambda: f64 },
}

/// Default Huber corner.
pub const DEFAULT_DELTA: f64 = 0.2;

impl Default for RobustLossSpec {
    /// Plain squared error — the non-robust baseline.
    fn default() -> Self {
        RobustLossSpec::L2
    }
}

impl RobustLossSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RobustLossSpec::L2 | RobustLossSpec::L1 => Ok(()),
            RobustLossSpec::Huber { delta } => {
                if delta > 0.0 && delta.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid(format!(
                        "huber delta must be positive and finite, got {delta} \
                         (use the l1 loss for the zero-delta mode)"
                    )))
                }
            }
            RobustLossSpec::Lts { lambda } => {
                if lambda > 0.0 && lambda <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("lts lambda must lie in (0, 1], got {lambda}")))
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RobustLossSpec::L2 => "l2",
            RobustLossSpec::L1 => "l1",
            RobustLossSpec::Huber { .. } => "huber",
            RobustLossSpec::Lts { .. } => "lts",
        }
    }

    /// The loss hyperparameter (δ or λ) when one exists.
    pub fn parameter(&self) -> Option<f64> {
        match *self {
            RobustLossSpec::Huber { delta } => Some(delta),
            RobustLossSpec::Lts { lambda } => Some(lambda),
            _ => None,
        }
    }
}

/// Residuals of one batch: per-sample residual vectors plus per-sample
/// mean-squared scores (the LTS ranking key).
#[derive(Clone, Debug)]
pub struct BatchResiduals {
    per_element: Vec<Vec<f64>>,
    per_sample_score: Vec<f64>,
}

impl BatchResiduals {
    /// Wraps residual vectors, computing per-sample scores.
    pub fn new(per_element: Vec<Vec<f64>>) -> Result<Self> {
        if per_element.is_empty() {
            return Err(Error::invalid("batch must be nonempty"));
        }
        if per_element.iter().any(|r| r.is_empty()) {
            return Err(Error::invalid("residual vectors must be nonempty"));
        }
        let per_sample_score = per_element
            .iter()
            .map(|r| r.iter().map(|&v| v * v).sum::<f64>() / r.len() as f64)
            .collect();
        Ok(BatchResiduals { per_element, per_sample_score })
    }

    pub fn batch_size(&self) -> usize {
        self.per_element.len()
    }

    pub fn per_element(&self) -> &[Vec<f64>] {
        &self.per_element
    }

    /// Mean squared residual of each sample.
    pub fn per_sample_score(&self) -> &[f64] {
        &self.per_sample_score
    }

    fn element_count(&self, selected: &[usize]) -> usize {
        selected.iter().map(|&i| self.per_element[i].len()).sum()
    }
}

/// Runs the model once per sample and returns the batch residuals
/// r_i = ε_i − prediction(x_t_i, t_i).
pub fn residuals(batch: &[NoisySample], model: &dyn NoisePredictor) -> Result<BatchResiduals> {
    if batch.is_empty() {
        return Err(Error::invalid("batch must be nonempty"));
    }
    let mut per_element = Vec::with_capacity(batch.len());
    for sample in batch {
        let pred = model.forward(&sample.x_t, sample.t)?;
        let r: Vec<f64> =
            sample.eps.data().iter().zip(&pred).map(|(&e, &p)| f64::from(e) - p).collect();
        per_element.push(r);
    }
    BatchResiduals::new(per_element)
}

/// A loss value with per-sample gradients with respect to the predictions.
///
/// `grad[i]` is all zeros for samples outside `selected`; `selected` is
/// ascending and covers the whole batch for every loss except LTS.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub grad: Vec<Vec<f64>>,
    pub selected: Vec<usize>,
}

/// Mean squared residual over all elements; gradient −2r/N.
pub fn l2_loss(res: &BatchResiduals) -> LossEval {
    let all: Vec<usize> = (0..res.batch_size()).collect();
    subset_l2(res, all)
}

/// Mean absolute residual; gradient −sign(r)/N.
pub fn l1_loss(res: &BatchResiduals) -> LossEval {
    let n = res.element_count(&(0..res.batch_size()).collect::<Vec<_>>()) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(res.batch_size());
    for r in res.per_element() {
        loss += r.iter().map(|v| v.abs()).sum::<f64>();
        grad.push(r.iter().map(|&v| -sign(v) / n).collect());
    }
    LossEval { loss: loss / n, grad, selected: (0..res.batch_size()).collect() }
}

/// Elementwise Huber loss averaged over all elements: ½r² inside the
/// corner |r| ≤ δ, δ(|r| − ½δ) outside; gradient −r/N inside, −δ·sign(r)/N
/// outside.
pub fn huber_loss(res: &BatchResiduals, delta: f64) -> Result<LossEval> {
    RobustLossSpec::Huber { delta }.validate()?;
    let n = res.element_count(&(0..res.batch_size()).collect::<Vec<_>>()) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(res.batch_size());
    for r in res.per_element() {
        let mut g = Vec::with_capacity(r.len());
        for &v in r {
            if v.abs() <= delta {
                loss += 0.5 * v * v;
                g.push(-v / n);
            } else {
                loss += delta * (v.abs() - 0.5 * delta);
                g.push(-delta * sign(v) / n);
            }
        }
        grad.push(g);
    }
    Ok(LossEval { loss: loss / n, grad, selected: (0..res.batch_size()).collect() })
}

/// Indices of the s = max(1, floor(λ·B)) samples with the smallest
/// mean-squared residual, ties broken by lowest index; returned ascending.
pub fn lts_select(res: &BatchResiduals, lambda: f64) -> Result<Vec<usize>> {
    RobustLossSpec::Lts { lambda }.validate()?;
    let b = res.batch_size();
    let s = ((lambda * b as f64).floor() as usize).max(1);
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| {
        res.per_sample_score[i]
            .partial_cmp(&res.per_sample_score[j])
            .expect("residual scores are finite")
            .then(i.cmp(&j))
    });
    let mut selected: Vec<usize> = order.into_iter().take(s).collect();
    selected.sort_unstable();
    Ok(selected)
}

/// L2 loss restricted to the LTS-selected samples. Unselected samples get
/// exactly zero gradient; the selection itself is treated as a constant
/// under differentiation. With λ = 1 this is bit-identical to [`l2_loss`]
/// because both run the same subset code path over the full batch.
pub fn lts_loss(res: &BatchResiduals, lambda: f64) -> Result<LossEval> {
    let selected = lts_select(res, lambda)?;
    Ok(subset_l2(res, selected))
}

/// Dispatches to the loss named by `spec`.
pub fn evaluate_loss(spec: &RobustLossSpec, res: &BatchResiduals) -> Result<LossEval> {
    match *spec {
        RobustLossSpec::L2 => Ok(l2_loss(res)),
        RobustLossSpec::L1 => Ok(l1_loss(res)),
        RobustLossSpec::Huber { delta } => huber_loss(res, delta),
        RobustLossSpec::Lts { lambda } => lts_loss(res, lambda),
    }
}

/// The sample set `spec` would train on for this batch: every index except
/// under LTS, where it is the trimmed selection.
pub fn selection(spec: &RobustLossSpec, res: &BatchResiduals) -> Result<Vec<usize>> {
    match *spec {
        RobustLossSpec::Lts { lambda } => lts_select(res, lambda),
        _ => Ok((0..res.batch_size()).collect()),
    }
}

/// Loss value over a frozen sample selection. Used by finite-difference
/// gradient checks, which must hold the LTS selection fixed while
/// parameters are perturbed; for the other losses `selected` must cover
/// the batch and the value equals the ordinary loss.
pub fn loss_on_selection(
    spec: &RobustLossSpec,
    res: &BatchResiduals,
    selected: &[usize],
) -> Result<f64> {
    match *spec {
        RobustLossSpec::Lts { .. } => Ok(subset_l2(res, selected.to_vec()).loss),
        RobustLossSpec::L2 => Ok(l2_loss(res).loss),
        RobustLossSpec::L1 => Ok(l1_loss(res).loss),
        RobustLossSpec::Huber { delta } => Ok(huber_loss(res, delta)?.loss),
    }
}

/// Loss and parameter gradient of one training batch.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss: f64,
    /// dLoss/dθ, length [`NoisePredictor::param_count`].
    pub param_grad: Vec<f64>,
    /// Samples that contributed gradient, ascending.
    pub selected: Vec<usize>,
}

/// Evaluates `spec` on one batch and backpropagates it to the model
/// parameters. Per-sample forward and backward passes run in parallel, but
/// the parameter gradient is accumulated serially in ascending sample
/// order, so the result is bitwise independent of the thread count.
/// Trimmed samples are skipped outright and contribute exactly zero.
pub fn batch_gradient(
    batch: &[NoisySample],
    model: &dyn NoisePredictor,
    spec: &RobustLossSpec,
) -> Result<BatchGradient> {
    spec.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("batch must be nonempty"));
    }
    let passes: Vec<(Vec<f64>, crate::model::Trace)> = batch
        .par_iter()
        .map(|s| model.forward_traced(&s.x_t, s.t))
        .collect::<Result<_>>()?;

    let per_element: Vec<Vec<f64>> = batch
        .iter()
        .zip(&passes)
        .map(|(s, (pred, _))| {
            s.eps.data().iter().zip(pred).map(|(&e, &p)| f64::from(e) - p).collect()
        })
        .collect();
    let res = BatchResiduals::new(per_element)?;
    let eval = evaluate_loss(spec, &res)?;

    let per_sample: Vec<Vec<f64>> = eval
        .selected
        .par_iter()
        .map(|&i| {
            let s = &batch[i];
            model.backward(&s.x_t, s.t, &passes[i].1, &eval.grad[i])
        })
        .collect::<Result<_>>()?;

    let mut param_grad = vec![0.0; model.param_count()];
    for g in &per_sample {
        vec_add_assign(&mut param_grad, g);
    }
    Ok(BatchGradient { loss: eval.loss, param_grad, selected: eval.selected })
}

/// Mean squared residual over the samples in `selected` (ascending), with
/// gradients −2r/N on those samples and zeros elsewhere. N counts selected
/// elements only. Both the plain L2 loss and the LTS loss are this
/// function, which is what makes their λ = 1 agreement exact.
fn subset_l2(res: &BatchResiduals, selected: Vec<usize>) -> LossEval {
    let n = res.element_count(&selected) as f64;
    let mut loss = 0.0;
    let mut grad: Vec<Vec<f64>> =
        res.per_element().iter().map(|r| vec![0.0; r.len()]).collect();
    for &i in &selected {
        let r = &res.per_element[i];
        for &v in r {
            loss += v * v;
        }
        grad[i] = r.iter().map(|&v| (-2.0 * v) / n).collect();
    }
    LossEval { loss: loss / n, grad, selected }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::RngState;

    fn residuals_from(vals: Vec<Vec<f64>>) -> BatchResiduals {
        BatchResiduals::new(vals).unwrap()
    }

    fn random_residuals(b: usize, n: usize, rng: &mut RngState) -> BatchResiduals {
        residuals_from(
            (0..b).map(|_| (0..n).map(|_| rng.standard_normal()).collect()).collect(),
        )
    }

    #[test]
    fn spec_validation() {
        assert!(RobustLossSpec::Huber { delta: 0.0 }.validate().is_err());
        assert!(RobustLossSpec::Huber { delta: -1.0 }.validate().is_err());
        assert!(RobustLossSpec::Huber { delta: f64::INFINITY }.validate().is_err());
        assert!(RobustLossSpec::Lts { lambda: 0.0 }.validate().is_err());
        assert!(RobustLossSpec::Lts { lambda: 1.1 }.validate().is_err());
        assert!(RobustLossSpec::Lts { lambda: 1.0 }.validate().is_ok());
        assert!(RobustLossSpec::L1.validate().is_ok());
    }

    #[test]
    fn spec_config_roundtrip() {
        let spec = RobustLossSpec::Huber { delta: 0.2 };
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"kind\":\"huber\""));
        assert!(json.contains("\"delta\":0.2"));
        let back: RobustLossSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn scores_are_elementwise_mean_squares() {
        let mut rng = RngState::from_seed(71);
        let res = random_residuals(6, 40, &mut rng);
        for (i, r) in res.per_element().iter().enumerate() {
            let mut naive = 0.0;
            for &v in r {
                naive += v * v;
            }
            naive /= r.len() as f64;
            assert!((res.per_sample_score()[i] - naive).abs() <= 1e-9);
            assert!(res.per_sample_score()[i] >= 0.0);
        }
    }

    #[test]
    fn l2_single_scalar_example() {
        let res = residuals_from(vec![vec![3.0]]);
        let eval = l2_loss(&res);
        assert_eq!(eval.loss, 9.0);
        assert_eq!(eval.grad[0][0], -6.0);
    }

    #[test]
    fn l2_zero_residuals() {
        let res = residuals_from(vec![vec![0.0; 8], vec![0.0; 8]]);
        let eval = l2_loss(&res);
        assert_eq!(eval.loss, 0.0);
        assert!(eval.grad.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn huber_branch_values() {
        // Quadratic branch: r = 0.1, delta = 0.2 gives half of 0.01.
        let res = residuals_from(vec![vec![0.1]]);
        assert!((huber_loss(&res, 0.2).unwrap().loss - 0.005).abs() < 1e-15);

        // Linear branch: r = 1.0, delta = 0.2 gives 0.2·(1.0 − 0.1).
        let res = residuals_from(vec![vec![1.0]]);
        assert!((huber_loss(&res, 0.2).unwrap().loss - 0.18).abs() < 1e-15);

        // At the corner both branches agree on value and gradient.
        let delta = 0.2;
        let res = residuals_from(vec![vec![delta]]);
        let eval = huber_loss(&res, delta).unwrap();
        assert!((eval.loss - delta * delta / 2.0).abs() < 1e-15);
        assert!((eval.grad[0][0] - (-delta)).abs() < 1e-15);
    }

    #[test]
    fn huber_is_continuous_at_the_corner() {
        let delta = 0.2;
        let h = 1e-6;
        let below = huber_loss(&residuals_from(vec![vec![delta - h]]), delta).unwrap().loss;
        let above = huber_loss(&residuals_from(vec![vec![delta + h]]), delta).unwrap().loss;
        assert!((below - above).abs() < 1e-5);
    }

    #[test]
    fn huber_is_exactly_half_l2_inside_the_corner() {
        let mut rng = RngState::from_seed(73);
        // All residuals scaled inside |r| <= delta.
        let vals: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..30).map(|_| rng.standard_normal() * 0.05).collect())
            .collect();
        let res = residuals_from(vals);
        let l2 = l2_loss(&res);
        let hb = huber_loss(&res, 0.2).unwrap();
        assert_eq!(hb.loss, 0.5 * l2.loss, "loss must be exactly half");
        for i in 0..res.batch_size() {
            for j in 0..res.per_element()[i].len() {
                assert_eq!(hb.grad[i][j], 0.5 * l2.grad[i][j], "gradient must be exactly half");
            }
        }
    }

    #[test]
    fn lts_select_order_statistics() {
        let res = residuals_from(vec![vec![2.0], vec![1.0], vec![3.0_f64.sqrt()], vec![2.0_f64.sqrt()]]);
        // Scores are [4, 1, 3, 2].
        let sel = lts_select(&res, 0.5).unwrap();
        assert_eq!(sel, vec![1, 3], "the two smallest scores are at indices 1 and 3");
    }

    #[test]
    fn lts_select_lambda_one_keeps_everything() {
        let mut rng = RngState::from_seed(79);
        let res = random_residuals(7, 10, &mut rng);
        assert_eq!(lts_select(&res, 1.0).unwrap(), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn lts_select_breaks_ties_by_lowest_index() {
        let res = residuals_from(vec![vec![1.0], vec![1.0], vec![1.0], vec![2.0]]);
        let sel = lts_select(&res, 0.5).unwrap();
        assert_eq!(sel, vec![0, 1]);
    }

    #[test]
    fn lts_select_keeps_at_least_one_sample() {
        let res = residuals_from(vec![vec![1.0], vec![2.0]]);
        let sel = lts_select(&res, 0.1).unwrap();
        assert_eq!(sel, vec![0]);
    }

    #[test]
    fn lts_matches_sort_oracle_on_random_batches() {
        let mut rng = RngState::from_seed(83);
        for trial in 0..1000 {
            let b = rng.uniform_inclusive(1, 12);
            let res = random_residuals(b, 6, &mut rng);
            let lambda = rng.uniform_f64(0.05, 1.0);
            let sel = lts_select(&res, lambda).unwrap();

            let s = ((lambda * b as f64).floor() as usize).max(1);
            let mut oracle: Vec<usize> = (0..b).collect();
            oracle.sort_by(|&i, &j| {
                res.per_sample_score()[i]
                    .partial_cmp(&res.per_sample_score()[j])
                    .unwrap()
                    .then(i.cmp(&j))
            });
            let mut oracle: Vec<usize> = oracle.into_iter().take(s).collect();
            oracle.sort_unstable();
            assert_eq!(sel, oracle, "trial {trial}");
        }
    }

    #[test]
    fn lts_lambda_one_is_bit_identical_to_l2() {
        let mut rng = RngState::from_seed(89);
        let res = random_residuals(9, 25, &mut rng);
        let l2 = l2_loss(&res);
        let lts = lts_loss(&res, 1.0).unwrap();
        assert_eq!(l2.loss.to_bits(), lts.loss.to_bits());
        for i in 0..res.batch_size() {
            for j in 0..res.per_element()[i].len() {
                assert_eq!(l2.grad[i][j].to_bits(), lts.grad[i][j].to_bits());
            }
        }
    }

    #[test]
    fn lts_trims_the_outlier() {
        let mut rng = RngState::from_seed(97);
        let mut vals: Vec<Vec<f64>> =
            (0..4).map(|_| (0..10).map(|_| rng.standard_normal() * 0.1).collect()).collect();
        vals[2] = vals[2].iter().map(|v| v * 100.0).collect();
        let res = residuals_from(vals);
        let eval = lts_loss(&res, 0.75).unwrap();
        assert_eq!(eval.selected, vec![0, 1, 3]);
        assert!(eval.grad[2].iter().all(|&g| g == 0.0), "trimmed sample gradient must be zero");
    }

    #[test]
    fn lts_loss_equals_l2_on_oracle_subset() {
        let mut rng = RngState::from_seed(101);
        for _ in 0..50 {
            let res = random_residuals(8, 12, &mut rng);
            let lambda = rng.uniform_f64(0.2, 1.0);
            let eval = lts_loss(&res, lambda).unwrap();
            let subset_vals: Vec<Vec<f64>> =
                eval.selected.iter().map(|&i| res.per_element()[i].clone()).collect();
            let sub = l2_loss(&residuals_from(subset_vals));
            assert!((eval.loss - sub.loss).abs() < 1e-12);
        }
    }

    #[test]
    fn outlier_gradient_influence_is_ordered() {
        // One outlier sample: gradient norm under Huber stays below L2's,
        // and LTS zeroes it entirely.
        let mut rng = RngState::from_seed(103);
        let mut vals: Vec<Vec<f64>> =
            (0..4).map(|_| (0..20).map(|_| rng.standard_normal() * 0.05).collect()).collect();
        vals[1] = (0..20).map(|_| rng.standard_normal() * 3.0).collect();
        let res = residuals_from(vals);

        let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let l2 = l2_loss(&res);
        let hb = huber_loss(&res, 0.2).unwrap();
        let lts = lts_loss(&res, 0.75).unwrap();
        assert!(norm(&hb.grad[1]) <= norm(&l2.grad[1]));
        assert_eq!(norm(&lts.grad[1]), 0.0);
    }

    #[test]
    fn losses_are_permutation_invariant() {
        let mut rng = RngState::from_seed(107);
        let vals: Vec<Vec<f64>> =
            (0..6).map(|_| (0..15).map(|_| rng.standard_normal()).collect()).collect();
        let res = residuals_from(vals.clone());

        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| vals[i].clone()).collect();
        let res_p = residuals_from(permuted);

        for spec in [
            RobustLossSpec::L2,
            RobustLossSpec::L1,
            RobustLossSpec::Huber { delta: 0.2 },
            RobustLossSpec::Lts { lambda: 0.5 },
        ] {
            let a = evaluate_loss(&spec, &res).unwrap();
            let b = evaluate_loss(&spec, &res_p).unwrap();
            assert!(
                (a.loss - b.loss).abs() < 1e-12,
                "{} loss changed under permutation",
                spec.name()
            );
        }

        // Selection commutes with relabeling: permuting the batch permutes
        // the selected index set.
        let sel = lts_select(&res, 0.5).unwrap();
        let sel_p = lts_select(&res_p, 0.5).unwrap();
        let mut mapped: Vec<usize> = sel_p.iter().map(|&i| perm[i]).collect();
        mapped.sort_unstable();
        assert_eq!(sel, mapped);
    }

    #[test]
    fn gradients_match_finite_differences_on_residual_perturbations() {
        // Central differences on a single prediction element; the loss sees
        // prediction changes as residual changes with opposite sign.
        let mut rng = RngState::from_seed(109);
        let specs = [
            RobustLossSpec::L2,
            RobustLossSpec::L1,
            RobustLossSpec::Huber { delta: 0.2 },
        ];
        for spec in specs {
            let vals: Vec<Vec<f64>> =
                (0..3).map(|_| (0..10).map(|_| rng.standard_normal() * 0.5).collect()).collect();
            let res = residuals_from(vals.clone());
            let eval = evaluate_loss(&spec, &res).unwrap();
            let h = 1e-4;
            for i in 0..3 {
                for j in 0..10 {
                    // Skip points too close to a kink for the step size.
                    let v = vals[i][j];
                    let kink_distance = match spec {
                        RobustLossSpec::Huber { delta } => (v.abs() - delta).abs(),
                        RobustLossSpec::L1 => v.abs(),
                        _ => f64::INFINITY,
                    };
                    if kink_distance < 10.0 * h {
                        continue;
                    }
                    let mut plus = vals.clone();
                    plus[i][j] -= h; // prediction up by h means residual down by h
                    let mut minus = vals.clone();
                    minus[i][j] += h;
                    let lp = evaluate_loss(&spec, &residuals_from(plus)).unwrap().loss;
                    let lm = evaluate_loss(&spec, &residuals_from(minus)).unwrap().loss;
                    let fd = (lp - lm) / (2.0 * h);
                    let rel = (fd - eval.grad[i][j]).abs()
                        / fd.abs().max(eval.grad[i][j].abs()).max(1e-12);
                    assert!(rel < 1e-4, "{} grad[{i}][{j}]: fd {fd} vs {}", spec.name(), eval.grad[i][j]);
                }
            }
        }
    }

    #[test]
    fn rejects_empty_batches() {
        assert!(BatchResiduals::new(vec![]).is_err());
        assert!(BatchResiduals::new(vec![vec![]]).is_err());
    }

    #[test]
    fn batch_gradient_matches_serial_oracle() {
        use crate::core::gaussian_like;
        use crate::diffusion::NoisySample;
        use crate::model::LinearPredictor;

        let mut rng = RngState::from_seed(113);
        let shape = (1, 4, 4);
        let model = LinearPredictor::new(shape, &mut rng).unwrap();
        let batch: Vec<NoisySample> = (0..5)
            .map(|_| NoisySample {
                x_t: gaussian_like(shape, &mut rng).unwrap(),
                eps: gaussian_like(shape, &mut rng).unwrap(),
                t: 3,
            })
            .collect();

        for spec in [
            RobustLossSpec::L2,
            RobustLossSpec::L1,
            RobustLossSpec::Huber { delta: 0.2 },
            RobustLossSpec::Lts { lambda: 0.6 },
        ] {
            let got = batch_gradient(&batch, &model, &spec).unwrap();

            // Serial recomputation, one sample at a time.
            let res = residuals(&batch, &model).unwrap();
            let eval = evaluate_loss(&spec, &res).unwrap();
            let mut want = vec![0.0; model.param_count()];
            for &i in &eval.selected {
                let (_, trace) = model.forward_traced(&batch[i].x_t, batch[i].t).unwrap();
                let g = model.backward(&batch[i].x_t, batch[i].t, &trace, &eval.grad[i]).unwrap();
                crate::core::vec_add_assign(&mut want, &g);
            }

            assert_eq!(got.loss.to_bits(), eval.loss.to_bits(), "{}", spec.name());
            assert_eq!(got.selected, eval.selected, "{}", spec.name());
            assert_eq!(got.param_grad.len(), want.len());
            for (a, b) in got.param_grad.iter().zip(&want) {
                assert_eq!(a.to_bits(), b.to_bits(), "{}", spec.name());
            }
        }
    }

    #[test]
    fn batch_gradient_skips_trimmed_samples_entirely() {
        use crate::core::gaussian_like;
        use crate::diffusion::NoisySample;
        use crate::model::LinearPredictor;

        let mut rng = RngState::from_seed(127);
        let shape = (1, 3, 3);
        let model = LinearPredictor::new(shape, &mut rng).unwrap();
        let mut batch: Vec<NoisySample> = (0..4)
            .map(|_| {
                let x_t = gaussian_like(shape, &mut rng).unwrap();
                let mut eps = gaussian_like(shape, &mut rng).unwrap();
                eps.data_mut().iter_mut().for_each(|v| *v *= 0.1);
                NoisySample { x_t, eps, t: 1 }
            })
            .collect();
        // Blow up one sample's residuals so LTS trims it.
        batch[1].eps.data_mut().iter_mut().for_each(|v| *v = 50.0);

        let spec = RobustLossSpec::Lts { lambda: 0.75 };
        let got = batch_gradient(&batch, &model, &spec).unwrap();
        assert_eq!(got.selected, vec![0, 2, 3]);

        // The gradient is identical to evaluating only the kept samples.
        let kept: Vec<NoisySample> =
            [0usize, 2, 3].iter().map(|&i| batch[i].clone()).collect();
        let direct = batch_gradient(&kept, &model, &RobustLossSpec::L2).unwrap();
        for (a, b) in got.param_grad.iter().zip(&direct.param_grad) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
