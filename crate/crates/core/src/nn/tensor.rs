//! Parameter storage.

use ndarray::{ArrayD, IxDyn};

use crate::scalar::Scalar;

/// A trainable parameter: values plus an accumulated gradient of the same
/// shape. Backward passes *add* into `grad`; the training loop zeroes it
/// between steps and the optimizer consumes it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    pub data: ArrayD<S>,
    pub grad: ArrayD<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Wrap parameter values; the gradient starts at zero.
    pub fn new(data: ArrayD<S>) -> Tensor<S> {
        let grad = ArrayD::zeros(data.raw_dim());
        Tensor { data, grad }
    }

    /// All-zero parameter of the given shape.
    pub fn zeros(shape: &[usize]) -> Tensor<S> {
        Tensor::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    /// Number of scalar values.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Reset the accumulated gradient to zero.
    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    /// Accumulate a gradient contribution (shapes must match).
    pub fn add_grad(&mut self, contribution: &ArrayD<S>) {
        debug_assert_eq!(self.grad.shape(), contribution.shape());
        self.grad += contribution;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn gradients_start_zero_and_accumulate() {
        let mut t = Tensor::<f64>::new(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        assert!(t.grad.iter().all(|&g| g == 0.0));
        let g = arr2(&[[0.5, 0.5], [1.0, -1.0]]).into_dyn();
        t.add_grad(&g);
        t.add_grad(&g);
        assert_eq!(t.grad[[0, 0]], 1.0);
        assert_eq!(t.grad[[1, 1]], -2.0);
        t.zero_grad();
        assert!(t.grad.iter().all(|&g| g == 0.0));
    }
}
