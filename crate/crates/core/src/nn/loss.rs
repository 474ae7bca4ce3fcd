//! Class-balanced weighting and the weighted negative log-likelihood loss.
//!
//! Tower windows and tower points are rare; plain NLL lets the majority
//! class swamp the gradient. The effective-number weighting gives class `i`
//! the raw weight `(1 - β) / (1 - β^{n_i})` — the reciprocal of the
//! "effective number" of its `n_i` samples — normalized to sum to one.
//! `β = 0` degenerates to uniform weights (plain NLL); β approaching 1
//! approaches inverse-frequency weighting.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-class loss weights derived from dataset counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub beta: f64,
    pub counts: Vec<u64>,
    /// Normalized weights, summing to 1 over the classes present.
    pub weights: Vec<f64>,
}

impl ClassWeights {
    /// Number of classes.
    pub fn k(&self) -> usize {
        self.weights.len()
    }
}

/// Effective-number class weighting.
///
/// `weights[i] ∝ (1 - β) / (1 - β^{counts[i]})`, normalized to sum 1.
/// Classes with zero count get weight 0 (they cannot appear as targets).
/// Equal counts give exactly uniform weights for any β, and `β = 0` gives
/// uniform weights for any counts.
pub fn class_balanced_weights(counts: &[u64], beta: f64) -> Result<ClassWeights> {
    if counts.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {}",
            counts.len()
        )));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Config(format!(
            "beta must lie in [0, 1), got {beta}"
        )));
    }
    if counts.iter().all(|&n| n == 0) {
        return Err(Error::InvalidData(
            "cannot weight classes: every count is zero".into(),
        ));
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| {
            if n == 0 {
                0.0
            } else if beta == 0.0 {
                1.0
            } else {
                (1.0 - beta) / (1.0 - beta.powf(n as f64))
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|r| r / total).collect();
    Ok(ClassWeights {
        beta,
        counts: counts.to_vec(),
        weights,
    })
}

/// Weighted NLL over log-probabilities, with weighted-*mean* reduction.
///
/// `loss = Σ_i w_{t_i}·(-log p_i[t_i]) / Σ_i w_{t_i}` — dividing by the
/// summed weights of the realized targets, so uniform weights reproduce the
/// plain mean exactly. Returns the loss (in `f64` for stable reporting) and
/// the gradient with respect to the log-probabilities.
pub fn weighted_nll_loss<S: Scalar>(
    log_probs: &Array2<S>,
    targets: &[usize],
    class_weights: &ClassWeights,
) -> Result<(f64, Array2<S>)> {
    let (m, k) = log_probs.dim();
    if targets.len() != m {
        return Err(Error::Shape {
            op: "weighted_nll_loss",
            message: format!("{m} rows of log-probs but {} targets", targets.len()),
        });
    }
    if class_weights.k() != k {
        return Err(Error::Shape {
            op: "weighted_nll_loss",
            message: format!(
                "{k} classes in log-probs but {} class weights",
                class_weights.k()
            ),
        });
    }
    if m == 0 {
        return Err(Error::InvalidData("empty batch in loss".into()));
    }
    let mut weight_total = 0.0f64;
    let mut loss_accum = 0.0f64;
    for (i, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::InvalidData(format!(
                "target {t} out of range for {k} classes (row {i})"
            )));
        }
        let w = class_weights.weights[t];
        weight_total += w;
        loss_accum -= w * log_probs[[i, t]].wide();
    }
    if weight_total <= 0.0 {
        return Err(Error::InvalidData(
            "all realized targets carry zero class weight".into(),
        ));
    }
    let loss = loss_accum / weight_total;

    let mut grad = Array2::<S>::zeros((m, k));
    for (i, &t) in targets.iter().enumerate() {
        grad[[i, t]] = S::of(-class_weights.weights[t] / weight_total);
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{DEFAULT_ATOL, DEFAULT_EPS, finite_diff_grad, max_rel_error};
    use ndarray::arr2;

    const TOL: f64 = 1e-12;

    #[test]
    fn weights_match_independently_computed_values() {
        // Oracle values computed at 40-digit precision.
        let w = class_balanced_weights(&[1, 10], 0.9).unwrap();
        assert!((w.weights[0] - 0.8669011973870284).abs() < TOL);
        assert!((w.weights[1] - 0.13309880261297158).abs() < TOL);

        let w = class_balanced_weights(&[100, 900], 0.999).unwrap();
        assert!((w.weights[0] - 0.8617814772649407).abs() < TOL);
        assert!((w.weights[1] - 0.13821852273505927).abs() < TOL);

        let w = class_balanced_weights(&[1544, 3088], 0.999).unwrap();
        assert!((w.weights[0] - 0.5481982965339353).abs() < TOL);
        assert!((w.weights[1] - 0.4518017034660648).abs() < TOL);

        let w = class_balanced_weights(&[10, 1000], 0.9999).unwrap();
        assert!((w.weights[0] - 0.9896060635180711).abs() < TOL);
        assert!((w.weights[1] - 0.010393936481928894).abs() < TOL);
    }

    #[test]
    fn equal_counts_give_exactly_uniform_weights() {
        for beta in [0.0, 0.9, 0.999, 0.9999] {
            let w = class_balanced_weights(&[5, 5], beta).unwrap();
            assert_eq!(w.weights, vec![0.5, 0.5], "beta {beta}");
        }
    }

    #[test]
    fn beta_zero_is_uniform_regardless_of_imbalance() {
        let w = class_balanced_weights(&[3, 7], 0.0).unwrap();
        assert_eq!(w.weights, vec![0.5, 0.5]);
        let w3 = class_balanced_weights(&[1, 10, 100], 0.0).unwrap();
        for v in &w3.weights {
            assert!((v - 1.0 / 3.0).abs() < TOL);
        }
    }

    #[test]
    fn weights_sum_to_one_and_rarer_classes_weigh_more() {
        for beta in [0.9, 0.999, 0.9999] {
            let w = class_balanced_weights(&[10, 500, 100_000], beta).unwrap();
            let total: f64 = w.weights.iter().sum();
            assert!((total - 1.0).abs() < TOL);
            assert!(w.weights[0] > w.weights[1], "beta {beta}");
            // The effective number saturates at 1/(1-beta), so for small
            // beta two large counts can weigh exactly the same.
            assert!(w.weights[1] >= w.weights[2], "beta {beta}");
        }
        let w = class_balanced_weights(&[10, 500, 100_000], 0.9999).unwrap();
        assert!(w.weights[1] > w.weights[2], "far from saturation");
    }

    #[test]
    fn larger_beta_sharpens_the_imbalance_correction() {
        let counts = [100, 10_000];
        let w_soft = class_balanced_weights(&counts, 0.9).unwrap();
        let w_hard = class_balanced_weights(&counts, 0.9999).unwrap();
        assert!(w_hard.weights[0] > w_soft.weights[0]);
    }

    #[test]
    fn zero_count_classes_get_zero_weight() {
        let w = class_balanced_weights(&[0, 10, 10], 0.9).unwrap();
        assert_eq!(w.weights[0], 0.0);
        assert!((w.weights[1] - 0.5).abs() < TOL);
    }

    #[test]
    fn invalid_weighting_inputs_are_rejected() {
        assert!(class_balanced_weights(&[5], 0.9).is_err());
        assert!(class_balanced_weights(&[5, 5], 1.0).is_err());
        assert!(class_balanced_weights(&[5, 5], -0.1).is_err());
        assert!(class_balanced_weights(&[0, 0], 0.9).is_err());
    }

    #[test]
    fn nll_matches_a_hand_computed_example() {
        let lp = arr2(&[
            [0.8f64.ln(), 0.2f64.ln()],
            [0.4f64.ln(), 0.6f64.ln()],
        ]);
        let w = ClassWeights {
            beta: 0.9,
            counts: vec![1, 3],
            weights: vec![0.25, 0.75],
        };
        let (loss, grad) = weighted_nll_loss(&lp, &[0, 1], &w).unwrap();
        assert!((loss - 0.43890510565304547).abs() < TOL);
        // Gradient hits only the target entries, scaled by w_t / Σw_t.
        assert!((grad[[0, 0]] + 0.25).abs() < TOL);
        assert!((grad[[1, 1]] + 0.75).abs() < TOL);
        assert_eq!(grad[[0, 1]], 0.0);
        assert_eq!(grad[[1, 0]], 0.0);
    }

    #[test]
    fn uniform_weights_reduce_to_the_plain_mean() {
        let lp = arr2(&[
            [0.7f64.ln(), 0.3f64.ln()],
            [0.1f64.ln(), 0.9f64.ln()],
            [0.5f64.ln(), 0.5f64.ln()],
        ]);
        let targets = [0, 1, 1];
        let w = class_balanced_weights(&[10, 10], 0.999).unwrap();
        let (loss, _) = weighted_nll_loss(&lp, &targets, &w).unwrap();
        let plain: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -lp[[i, t]])
            .sum::<f64>()
            / 3.0;
        assert!((loss - plain).abs() < TOL);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let w = ClassWeights {
            beta: 0.999,
            counts: vec![2, 8],
            weights: vec![0.7, 0.3],
        };
        let targets = [0usize, 1, 1, 0];
        let point: Vec<f64> = (0..8).map(|i| -((i as f64 * 0.37).cos().abs() + 0.1)).collect();
        let eval = |p: &[f64]| {
            let lp = Array2::from_shape_vec((4, 2), p.to_vec()).unwrap();
            weighted_nll_loss(&lp, &targets, &w).unwrap().0
        };
        let numeric = finite_diff_grad(eval, &point, DEFAULT_EPS);
        let lp = Array2::from_shape_vec((4, 2), point.clone()).unwrap();
        let (_, grad) = weighted_nll_loss(&lp, &targets, &w).unwrap();
        let analytic: Vec<f64> = grad.iter().copied().collect();
        assert!(max_rel_error(&analytic, &numeric, DEFAULT_ATOL) < 1e-9);
    }

    #[test]
    fn nll_rejects_shape_and_target_violations() {
        let lp = arr2(&[[0.5f32.ln(), 0.5f32.ln()]]);
        let w = class_balanced_weights(&[1, 1], 0.9).unwrap();
        assert!(weighted_nll_loss(&lp, &[0, 1], &w).is_err());
        assert!(weighted_nll_loss(&lp, &[2], &w).is_err());
        let empty = Array2::<f32>::zeros((0, 2));
        assert!(weighted_nll_loss(&empty, &[], &w).is_err());
    }
}
