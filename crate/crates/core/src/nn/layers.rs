//! Parameterized layers: linear (shared MLP when applied per point), batch
//! normalization, and dropout.
//!
//! Forward passes work on `[rows, channels]` matrices; batched point tensors
//! `[b, n, c]` flatten their leading axes first (shared-weight application
//! over points is exactly a row-flattened matmul). Backward passes
//! accumulate parameter gradients in place and return the input gradient.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Mode, Tensor};
use crate::scalar::Scalar;

/// Flatten `[b, n, c]` into a `[b*n, c]` view (free for standard layout).
pub fn flat2<S: Scalar>(x: &Array3<S>) -> ArrayView2<'_, S> {
    let (b, n, c) = x.dim();
    x.view()
        .into_shape_with_order((b * n, c))
        .expect("batched point tensors are standard layout")
}

/// Restore a `[b*n, c]` matrix to `[b, n, c]`.
pub fn unflat3<S: Scalar>(x: Array2<S>, b: usize, n: usize) -> Array3<S> {
    let c = x.ncols();
    x.into_shape_with_order((b, n, c))
        .expect("row count is b*n by construction")
}

/// Fully connected layer `y = x·W + b` with `W: [c_in, c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    /// Uniform init in `±1/sqrt(c_in)` for weights and bias, drawn in `f64`
    /// (row-major weight first, then bias) so both precisions see identical
    /// values.
    pub fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Linear<S> {
        assert!(c_in > 0 && c_out > 0, "layer widths must be positive");
        let bound = 1.0 / (c_in as f64).sqrt();
        let mut draw = || S::of(rng.random_range(-bound..bound));
        let weight = Array2::from_shape_simple_fn((c_in, c_out), &mut draw);
        let bias = Array1::from_shape_simple_fn(c_out, &mut draw);
        Linear {
            weight: Tensor::new(weight.into_dyn()),
            bias: Tensor::new(bias.into_dyn()),
        }
    }

    /// All-zero layer; used where the caller installs specific values (e.g.
    /// identity-initialized transform regressors).
    pub fn zeros(c_in: usize, c_out: usize) -> Linear<S> {
        Linear {
            weight: Tensor::zeros(&[c_in, c_out]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[1]
    }

    fn w2(&self) -> ArrayView2<'_, S> {
        self.weight
            .data
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear weight is 2-d")
    }

    /// `y = x·W + b` for `x: [m, c_in]`.
    pub fn forward(&self, x: &ArrayView2<S>) -> Array2<S> {
        debug_assert_eq!(x.ncols(), self.c_in());
        let b1 = self
            .bias
            .data
            .view()
            .into_dimensionality::<Ix1>()
            .expect("linear bias is 1-d");
        let mut y = x.dot(&self.w2());
        y += &b1;
        y
    }

    /// Accumulate `dW = xᵀ·dy`, `db = Σ_rows dy`; return `dx = dy·Wᵀ`.
    pub fn backward(&mut self, x: &ArrayView2<S>, dy: &ArrayView2<S>) -> Array2<S> {
        debug_assert_eq!(x.nrows(), dy.nrows());
        debug_assert_eq!(dy.ncols(), self.c_out());
        let dw = x.t().dot(dy);
        let db = dy.sum_axis(Axis(0));
        self.weight.add_grad(&dw.into_dyn());
        self.bias.add_grad(&db.into_dyn());
        dy.dot(&self.w2().t())
    }

    /// Trainable parameters with canonical suffix names.
    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<S>)> {
        vec![
            (format!("{prefix}.weight"), &mut self.weight),
            (format!("{prefix}.bias"), &mut self.bias),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Per-channel batch normalization over the row axis.
///
/// Training normalizes with biased batch variance and updates running
/// statistics with the unbiased one (`momentum` fraction of the new value);
/// evaluation applies the stored running statistics, making it
/// deterministic and batch-independent.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Array1<S>,
    pub running_var: Array1<S>,
    pub momentum: f64,
    pub eps: f64,
}

/// Values saved by a training-mode forward for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<S: Scalar> {
    xhat: Array2<S>,
    inv_std: Array1<S>,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(channels: usize) -> BatchNorm<S> {
        BatchNorm {
            gamma: Tensor::new(Array1::from_elem(channels, S::one()).into_dyn()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, S::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn gamma1(&self) -> ndarray::ArrayView1<'_, S> {
        self.gamma.data.view().into_dimensionality::<Ix1>().unwrap()
    }

    fn beta1(&self) -> ndarray::ArrayView1<'_, S> {
        self.beta.data.view().into_dimensionality::<Ix1>().unwrap()
    }

    /// Normalize rows of `x: [m, c]`. Training mode needs `m >= 2` (batch
    /// statistics are undefined for a single row) and returns the cache the
    /// backward pass requires; eval mode mutates nothing and returns no
    /// cache.
    pub fn forward(
        &mut self,
        x: &ArrayView2<S>,
        mode: Mode,
    ) -> Result<(Array2<S>, Option<BnCache<S>>)> {
        let (m, c) = x.dim();
        if c != self.channels() {
            return Err(Error::Shape {
                op: "batchnorm",
                message: format!("input has {c} channels, layer expects {}", self.channels()),
            });
        }
        match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::Shape {
                        op: "batchnorm",
                        message: format!(
                            "training-mode batch norm needs at least 2 rows, got {m}"
                        ),
                    });
                }
                // Row sweeps over contiguous buffers instead of broadcast
                // arithmetic: per-channel broadcasts leave ndarray's fast
                // path and dominate the whole layer at trunk widths.
                let x_store;
                let xs: &[S] = match x.as_slice() {
                    Some(s) => s,
                    None => {
                        x_store = x.to_owned();
                        x_store.as_slice().expect("owned copy is standard layout")
                    }
                };
                let mean = x.mean_axis(Axis(0)).expect("m >= 2");
                let ms = mean.as_slice().expect("freshly allocated");
                let m_s = S::of(m as f64);
                let mut var_biased = Array1::<S>::zeros(c);
                {
                    let vs = var_biased.as_slice_mut().expect("freshly allocated");
                    for row in xs.chunks_exact(c) {
                        for j in 0..c {
                            let d = row[j] - ms[j];
                            vs[j] += d * d;
                        }
                    }
                    for v in vs.iter_mut() {
                        *v /= m_s;
                    }
                }
                let inv_std = var_biased.mapv(|v| (v + S::of(self.eps)).sqrt().recip());
                let is = inv_std.as_slice().expect("freshly allocated");
                let gamma = self.gamma1();
                let gs = gamma.as_slice().expect("parameter vectors are contiguous");
                let beta = self.beta1();
                let bs = beta.as_slice().expect("parameter vectors are contiguous");
                let mut xhat = Array2::<S>::zeros((m, c));
                let mut y = Array2::<S>::zeros((m, c));
                {
                    let hs = xhat.as_slice_mut().expect("freshly allocated");
                    let ys = y.as_slice_mut().expect("freshly allocated");
                    for (row, (hrow, yrow)) in xs
                        .chunks_exact(c)
                        .zip(hs.chunks_exact_mut(c).zip(ys.chunks_exact_mut(c)))
                    {
                        for j in 0..c {
                            let h = (row[j] - ms[j]) * is[j];
                            hrow[j] = h;
                            yrow[j] = h * gs[j] + bs[j];
                        }
                    }
                }

                // Running statistics use the unbiased variance, matching the
                // convention of mainstream frameworks.
                let unbias = S::of(m as f64 / (m as f64 - 1.0));
                let var_unbiased = var_biased.mapv(|v| v * unbias);
                let keep = S::of(1.0 - self.momentum);
                let take = S::of(self.momentum);
                self.running_mean = self.running_mean.mapv(|v| v * keep) + mean.mapv(|v| v * take);
                self.running_var =
                    self.running_var.mapv(|v| v * keep) + var_unbiased.mapv(|v| v * take);

                Ok((y, Some(BnCache { xhat, inv_std })))
            }
            Mode::Eval => {
                let inv_std = self
                    .running_var
                    .mapv(|v| (v + S::of(self.eps)).sqrt().recip());
                let x_store;
                let xs: &[S] = match x.as_slice() {
                    Some(s) => s,
                    None => {
                        x_store = x.to_owned();
                        x_store.as_slice().expect("owned copy is standard layout")
                    }
                };
                let ms = self
                    .running_mean
                    .as_slice()
                    .expect("parameter vectors are contiguous");
                let is = inv_std.as_slice().expect("freshly allocated");
                let gamma = self.gamma1();
                let gs = gamma.as_slice().expect("parameter vectors are contiguous");
                let beta = self.beta1();
                let bs = beta.as_slice().expect("parameter vectors are contiguous");
                let mut y = Array2::<S>::zeros((m, c));
                {
                    let ys = y.as_slice_mut().expect("freshly allocated");
                    for (row, yrow) in xs.chunks_exact(c).zip(ys.chunks_exact_mut(c)) {
                        for j in 0..c {
                            yrow[j] = (row[j] - ms[j]) * is[j] * gs[j] + bs[j];
                        }
                    }
                }
                Ok((y, None))
            }
        }
    }

    /// Backward through a training-mode forward. Accumulates `dgamma`,
    /// `dbeta`; returns `dx`.
    pub fn backward(&mut self, cache: &BnCache<S>, dy: &ArrayView2<S>) -> Array2<S> {
        let (m, c) = dy.dim();
        debug_assert_eq!(dy.dim(), cache.xhat.dim());
        let dy_store;
        let dys: &[S] = match dy.as_slice() {
            Some(s) => s,
            None => {
                dy_store = dy.to_owned();
                dy_store.as_slice().expect("owned copy is standard layout")
            }
        };
        let hs = cache
            .xhat
            .as_slice()
            .expect("forward caches are standard layout");

        // Single sweep for both reductions, then a fused pass for
        // dx = γ·inv_std/m · (m·dy − Σdy − x̂·Σ(dy·x̂)).
        let mut dbeta = Array1::<S>::zeros(c);
        let mut dgamma = Array1::<S>::zeros(c);
        {
            let dbs = dbeta.as_slice_mut().expect("freshly allocated");
            let dgs = dgamma.as_slice_mut().expect("freshly allocated");
            for (dy_row, h_row) in dys.chunks_exact(c).zip(hs.chunks_exact(c)) {
                for j in 0..c {
                    dbs[j] += dy_row[j];
                    dgs[j] += h_row[j] * dy_row[j];
                }
            }
        }
        let m_s = S::of(m as f64);
        let scale = (&self.gamma1() * &cache.inv_std).mapv(|v| v / m_s);
        let mut dx = Array2::<S>::zeros((m, c));
        {
            let dbs = dbeta.as_slice().expect("freshly allocated");
            let dgs = dgamma.as_slice().expect("freshly allocated");
            let ss = scale.as_slice().expect("freshly allocated");
            let dxs = dx.as_slice_mut().expect("freshly allocated");
            for ((dy_row, h_row), dx_row) in dys
                .chunks_exact(c)
                .zip(hs.chunks_exact(c))
                .zip(dxs.chunks_exact_mut(c))
            {
                for j in 0..c {
                    dx_row[j] = (dy_row[j] * m_s - dbs[j] - h_row[j] * dgs[j]) * ss[j];
                }
            }
        }

        self.gamma.add_grad(&dgamma.into_dyn());
        self.beta.add_grad(&dbeta.into_dyn());
        dx
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<S>)> {
        vec![
            (format!("{prefix}.gamma"), &mut self.gamma),
            (format!("{prefix}.beta"), &mut self.beta),
        ]
    }

    /// Non-trainable state (running statistics) for checkpointing.
    pub fn named_buffers_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array1<S>)> {
        vec![
            (format!("{prefix}.running_mean"), &mut self.running_mean),
            (format!("{prefix}.running_var"), &mut self.running_var),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

/// Inverted dropout: training scales surviving activations by
/// `1/(1 - rate)` so evaluation is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Dropout> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        Ok(Dropout { rate })
    }

    /// Apply dropout. Returns the output and, when anything was dropped, the
    /// scaled keep-mask consumed by [`Dropout::backward`]. Training with a
    /// positive rate requires a random stream.
    pub fn forward<S: Scalar>(
        &self,
        x: &Array2<S>,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<S>, Option<Array2<S>>)> {
        if mode == Mode::Eval || self.rate == 0.0 {
            return Ok((x.clone(), None));
        }
        let rng = rng.ok_or_else(|| {
            Error::Config("training-mode dropout needs a random stream".into())
        })?;
        let keep_scale = S::of(1.0 / (1.0 - self.rate));
        let mask = Array2::from_shape_simple_fn(x.dim(), || {
            if rng.random::<f64>() < self.rate {
                S::zero()
            } else {
                keep_scale
            }
        });
        Ok((x * &mask, Some(mask)))
    }

    /// Backward using the mask returned by the forward pass.
    pub fn backward<S: Scalar>(&self, mask: &Array2<S>, dy: &ArrayView2<S>) -> Array2<S> {
        dy * mask
    }
}
