//! One hidden layer of a shared MLP: linear map, optional batch
//! normalization, optional ReLU. Point-wise stages and fully connected
//! heads are both stacks of these.

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::layers::{BatchNorm, BnCache, Linear};
use crate::nn::ops::{relu, relu_backward};
use crate::nn::{Mode, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub(crate) struct Block<S: Scalar> {
    pub lin: Linear<S>,
    pub bn: Option<BatchNorm<S>>,
    pub relu: bool,
}

pub(crate) struct BlockCache<S: Scalar> {
    x: Array2<S>,
    bn: Option<BnCache<S>>,
    /// Pre-activation input to the ReLU, kept only when one is applied.
    act_in: Option<Array2<S>>,
}

impl<S: Scalar> Block<S> {
    /// Hidden layer: linear + (optional) batch norm + ReLU.
    pub fn hidden(c_in: usize, c_out: usize, batchnorm: bool, rng: &mut ChaCha8Rng) -> Block<S> {
        Block {
            lin: Linear::new(c_in, c_out, rng),
            bn: batchnorm.then(|| BatchNorm::new(c_out)),
            relu: true,
        }
    }

    /// Output layer: plain linear map.
    pub fn output(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Block<S> {
        Block {
            lin: Linear::new(c_in, c_out, rng),
            bn: None,
            relu: false,
        }
    }

    pub fn forward(&mut self, x: &ArrayView2<S>, mode: Mode) -> Result<(Array2<S>, BlockCache<S>)> {
        let cache_x = x.to_owned();
        let lin_out = self.lin.forward(x);
        let (bn_out, bn_cache) = match self.bn.as_mut() {
            Some(bn) => bn.forward(&lin_out.view(), mode)?,
            None => (lin_out, None),
        };
        if self.relu {
            let y = relu(&bn_out);
            Ok((
                y,
                BlockCache {
                    x: cache_x,
                    bn: bn_cache,
                    act_in: Some(bn_out),
                },
            ))
        } else {
            Ok((
                bn_out,
                BlockCache {
                    x: cache_x,
                    bn: bn_cache,
                    act_in: None,
                },
            ))
        }
    }

    /// Accumulate parameter gradients; return the gradient w.r.t. the input.
    pub fn backward(&mut self, cache: &BlockCache<S>, dy: &ArrayView2<S>) -> Array2<S> {
        let d_act = if self.relu {
            let act_in = cache.act_in.as_ref().expect("relu forward kept its input");
            relu_backward(act_in, &dy.to_owned())
        } else {
            dy.to_owned()
        };
        let d_lin = match (self.bn.as_mut(), cache.bn.as_ref()) {
            (Some(bn), Some(bn_cache)) => bn.backward(bn_cache, &d_act.view()),
            (Some(_), None) => unreachable!("batch-norm backward requires a training-mode cache"),
            (None, _) => d_act,
        };
        self.lin.backward(&cache.x.view(), &d_lin.view())
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = self.lin.named_params_mut(prefix);
        if let Some(bn) = self.bn.as_mut() {
            out.extend(bn.named_params_mut(prefix));
        }
        out
    }

    /// Non-trainable running statistics, when batch norm is present.
    pub fn named_buffers_mut(&mut self, prefix: &str) -> Vec<(String, &mut ndarray::Array1<S>)> {
        match self.bn.as_mut() {
            Some(bn) => bn.named_buffers_mut(prefix),
            None => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.lin.param_count() + self.bn.as_ref().map_or(0, BatchNorm::param_count)
    }
}
