//! Stateless network operations with hand-derived backward passes.
//!
//! Conventions: batched point features are `[batch, points, channels]` in
//! standard (row-major) layout; per-sample features are `[rows, channels]`.
//! Backward functions take the upstream gradient and return the input
//! gradient; parameter-free ops have no side effects.

use ndarray::{Array, Array2, Array3, Dimension, Zip};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rectified linear unit, elementwise `max(0, x)`.
pub fn relu<S: Scalar, D: Dimension>(x: &Array<S, D>) -> Array<S, D> {
    x.mapv(|v| if v > S::zero() { v } else { S::zero() })
}

/// Backward of [`relu`]: passes the gradient where the *input* was strictly
/// positive (the subgradient at 0 is taken as 0).
pub fn relu_backward<S: Scalar, D: Dimension>(
    x: &Array<S, D>,
    dy: &Array<S, D>,
) -> Array<S, D> {
    let mut dx = dy.clone();
    // A value-select compiles branch-free; a conditional store would
    // mispredict on roughly half the activations.
    Zip::from(&mut dx).and(x).for_each(|d, &xv| {
        *d = if xv > S::zero() { *d } else { S::zero() };
    });
    dx
}

/// Row-wise log-softmax with the max-subtraction trick, so large logits stay
/// finite.
pub fn log_softmax<S: Scalar>(x: &Array2<S>) -> Array2<S> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.fold(S::neg_infinity(), |a, &b| if b > a { b } else { a });
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = *v - max;
            sum += v.exp();
        }
        let lse = sum.ln();
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    y
}

/// Backward of [`log_softmax`] given its *output* `y`:
/// `dx = dy - softmax(x) * rowsum(dy)` where `softmax(x) = exp(y)`.
pub fn log_softmax_backward<S: Scalar>(y: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
    let mut dx = dy.clone();
    for (mut dx_row, y_row) in dx.rows_mut().into_iter().zip(y.rows()) {
        let total = dx_row.iter().fold(S::zero(), |a, &b| a + b);
        for (d, &yv) in dx_row.iter_mut().zip(y_row) {
            *d = *d - yv.exp() * total;
        }
    }
    dx
}

/// Max-pool over the point axis: `[b, n, c] -> [b, c]`, also returning the
/// index of the winning point per `(batch, channel)`.
///
/// Ties break to the lowest point index (strict `>` comparison while
/// scanning up), which makes the pooled values — the only thing later layers
/// see — exactly invariant to permuting or duplicating input points.
pub fn max_pool_points<S: Scalar>(x: &Array3<S>) -> Result<(Array2<S>, Array2<usize>)> {
    let (b, n, c) = x.dim();
    if n == 0 {
        return Err(Error::Shape {
            op: "max_pool_points",
            message: "cannot pool over zero points".into(),
        });
    }
    let xs = x.as_slice().ok_or_else(|| Error::Shape {
        op: "max_pool_points",
        message: "input must be in standard layout".into(),
    })?;
    let mut values = vec![S::neg_infinity(); b * c];
    let mut winners = vec![0usize; b * c];
    for bi in 0..b {
        let out = bi * c;
        for ni in 0..n {
            let row = &xs[(bi * n + ni) * c..(bi * n + ni + 1) * c];
            if ni == 0 {
                values[out..out + c].copy_from_slice(row);
                continue;
            }
            for ci in 0..c {
                if row[ci] > values[out + ci] {
                    values[out + ci] = row[ci];
                    winners[out + ci] = ni;
                }
            }
        }
    }
    let values = Array2::from_shape_vec((b, c), values).expect("constructed shape");
    let winners = Array2::from_shape_vec((b, c), winners).expect("constructed shape");
    Ok((values, winners))
}

/// Backward of [`max_pool_points`]: the gradient of each pooled channel
/// flows to the point that won it.
pub fn max_pool_points_backward<S: Scalar>(
    argmax: &Array2<usize>,
    dy: &Array2<S>,
    n: usize,
) -> Array3<S> {
    let (b, c) = dy.dim();
    debug_assert_eq!(argmax.dim(), (b, c));
    let mut dx = Array3::zeros((b, n, c));
    for bi in 0..b {
        for ci in 0..c {
            dx[[bi, argmax[[bi, ci]], ci]] += dy[[bi, ci]];
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{DEFAULT_ATOL, DEFAULT_EPS, finite_diff_grad, max_rel_error};
    use ndarray::{arr2, arr3};

    #[test]
    fn relu_clamps_negatives_only() {
        let x = arr2(&[[-1.5, 0.0, 2.5], [0.1, -0.1, 0.0]]);
        let y = relu(&x);
        assert_eq!(y, arr2(&[[0.0, 0.0, 2.5], [0.1, 0.0, 0.0]]));
    }

    #[test]
    fn relu_gradient_matches_finite_differences() {
        // Points kept away from the kink at 0.
        let x0 = [-1.2, 0.7, 2.0, -0.4, 0.9, 1.5];
        let coeff = [0.3, -1.0, 0.5, 2.0, -0.7, 1.1];
        let f = |p: &[f64]| {
            let x = Array2::from_shape_vec((2, 3), p.to_vec()).unwrap();
            relu(&x)
                .iter()
                .zip(&coeff)
                .map(|(&y, &c)| y * c)
                .sum::<f64>()
        };
        let numeric = finite_diff_grad(f, &x0, DEFAULT_EPS);
        let x = Array2::from_shape_vec((2, 3), x0.to_vec()).unwrap();
        let dy = Array2::from_shape_vec((2, 3), coeff.to_vec()).unwrap();
        let analytic = relu_backward(&x, &dy);
        let analytic: Vec<f64> = analytic.iter().copied().collect();
        assert!(max_rel_error(&analytic, &numeric, DEFAULT_ATOL) < 1e-10);
    }

    #[test]
    fn log_softmax_of_equal_logits_is_minus_log_k() {
        let y = log_softmax(&arr2(&[[0.0f64, 0.0]]));
        let expected = -(2.0f64.ln());
        assert!((y[[0, 0]] - expected).abs() < 1e-15);
        assert!((y[[0, 1]] - expected).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_rows_exponentiate_to_one_and_shift_invariance_holds() {
        let x = arr2(&[[1.0f64, -2.0, 0.5], [3.0, 3.0, -1.0]]);
        let y = log_softmax(&x);
        for row in y.rows() {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let shifted = log_softmax(&x.mapv(|v| v + 123.0));
        for (a, b) in y.iter().zip(shifted.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn log_softmax_survives_huge_logits() {
        let y = log_softmax(&arr2(&[[1000.0f64, 0.0]]));
        assert!(y.iter().all(|v| v.is_finite()));
        assert!(y[[0, 0]].abs() < 1e-12, "dominant logit has log-prob ~0");
    }

    #[test]
    fn log_softmax_gradient_matches_finite_differences() {
        let x0 = [0.3, -1.0, 0.8, 2.0, 0.0, -0.5];
        let coeff = [1.0, -0.4, 0.25, -2.0, 0.6, 1.3];
        let f = |p: &[f64]| {
            let x = Array2::from_shape_vec((2, 3), p.to_vec()).unwrap();
            log_softmax(&x)
                .iter()
                .zip(&coeff)
                .map(|(&y, &c)| y * c)
                .sum::<f64>()
        };
        let numeric = finite_diff_grad(f, &x0, DEFAULT_EPS);
        let x = Array2::from_shape_vec((2, 3), x0.to_vec()).unwrap();
        let y = log_softmax(&x);
        let dy = Array2::from_shape_vec((2, 3), coeff.to_vec()).unwrap();
        let analytic: Vec<f64> = log_softmax_backward(&y, &dy).iter().copied().collect();
        assert!(max_rel_error(&analytic, &numeric, DEFAULT_ATOL) < 1e-9);
    }

    #[test]
    fn max_pool_takes_channelwise_maxima_with_first_index_ties() {
        let x = arr3(&[[
            [1.0, 5.0, 2.0],
            [4.0, 5.0, 1.0],
            [4.0, -1.0, 3.0],
        ]]);
        let (y, arg) = max_pool_points(&x).unwrap();
        assert_eq!(y, arr2(&[[4.0, 5.0, 3.0]]));
        // Channel 0: 4.0 appears at points 1 and 2 → first wins.
        // Channel 1: 5.0 at points 0 and 1 → first wins.
        assert_eq!(arg, arr2(&[[1usize, 0, 2]]));
    }

    #[test]
    fn max_pool_values_are_invariant_to_permutation_and_duplication() {
        let x = arr3(&[[
            [0.5, -2.0],
            [1.5, 0.25],
            [-0.75, 3.0],
        ]]);
        let (y, _) = max_pool_points(&x).unwrap();
        let permuted = arr3(&[[
            [-0.75, 3.0],
            [0.5, -2.0],
            [1.5, 0.25],
        ]]);
        let (yp, _) = max_pool_points(&permuted).unwrap();
        assert_eq!(y, yp);
        let duplicated = arr3(&[[
            [0.5, -2.0],
            [1.5, 0.25],
            [-0.75, 3.0],
            [1.5, 0.25],
            [0.5, -2.0],
        ]]);
        let (yd, _) = max_pool_points(&duplicated).unwrap();
        assert_eq!(y, yd);
    }

    #[test]
    fn max_pool_gradient_matches_finite_differences() {
        // Distinct values keep the argmax stable under the probe step.
        let x0 = [0.9, -1.2, 0.1, 0.4, 2.2, -0.6, 1.7, 0.3];
        let coeff = [0.8, -1.5];
        let f = |p: &[f64]| {
            let x = Array3::from_shape_vec((1, 4, 2), p.to_vec()).unwrap();
            let (y, _) = max_pool_points(&x).unwrap();
            y.iter().zip(&coeff).map(|(&v, &c)| v * c).sum::<f64>()
        };
        let numeric = finite_diff_grad(f, &x0, DEFAULT_EPS);
        let x = Array3::from_shape_vec((1, 4, 2), x0.to_vec()).unwrap();
        let (_, arg) = max_pool_points(&x).unwrap();
        let dy = Array2::from_shape_vec((1, 2), coeff.to_vec()).unwrap();
        let analytic: Vec<f64> = max_pool_points_backward(&arg, &dy, 4).iter().copied().collect();
        assert!(max_rel_error(&analytic, &numeric, DEFAULT_ATOL) < 1e-10);
    }

    #[test]
    fn pooling_zero_points_is_an_error() {
        let x = Array3::<f32>::zeros((2, 0, 3));
        assert!(max_pool_points(&x).is_err());
    }
}
