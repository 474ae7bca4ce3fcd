//! Transform networks: small regression nets that predict a square matrix
//! applied to every point of a window. The input transform aligns the
//! horizontal coordinates (2×2); the feature transform aligns intermediate
//! point features (f×f) and carries an orthogonality penalty.

use ndarray::{Array2, Array3, Axis, s};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::models::ArchitectureSpec;
use crate::models::block::{Block, BlockCache};
use crate::nn::layers::{flat2, unflat3};
use crate::nn::ops::{max_pool_points, max_pool_points_backward};
use crate::nn::{Mode, Tensor};
use crate::scalar::Scalar;

/// Regression net producing one `dim × dim` matrix per window.
///
/// Point trunk widths and head widths are shared with the parent
/// architecture; the final layer starts as the identity map (zero weight,
/// identity bias) so an untrained net is a no-op.
#[derive(Debug, Clone)]
pub struct TNet<S: Scalar> {
    dim: usize,
    trunk: Vec<Block<S>>,
    head: Vec<Block<S>>,
    out: Block<S>,
}

pub struct TNetCache<S: Scalar> {
    n: usize,
    trunk: Vec<BlockCache<S>>,
    argmax: Array2<usize>,
    head: Vec<BlockCache<S>>,
    out: BlockCache<S>,
}

impl<S: Scalar> TNet<S> {
    pub fn new(dim: usize, arch: &ArchitectureSpec, rng: &mut ChaCha8Rng) -> TNet<S> {
        let [_, _, b1, b2, b3] = arch.widths;
        let trunk = vec![
            Block::hidden(dim, b1, arch.batchnorm, rng),
            Block::hidden(b1, b2, arch.batchnorm, rng),
            Block::hidden(b2, b3, arch.batchnorm, rng),
        ];
        let head = vec![
            Block::hidden(b3, arch.head[0], arch.batchnorm, rng),
            Block::hidden(arch.head[0], arch.head[1], arch.batchnorm, rng),
        ];
        let mut out = Block::output(arch.head[1], dim * dim, rng);
        out.lin.weight.data.fill(S::zero());
        let identity = Array2::<S>::eye(dim).into_raw_vec_and_offset().0;
        out.lin.bias.data = ndarray::Array1::from_vec(identity).into_dyn();
        TNet {
            dim,
            trunk,
            head,
            out,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Predict one matrix per window from `x: [b, n, dim]`.
    pub fn forward(
        &mut self,
        x: &Array3<S>,
        mode: Mode,
    ) -> Result<(Array3<S>, TNetCache<S>)> {
        let (b, n, _dim) = x.dim();
        let mut cur = flat2(x).to_owned();
        let mut trunk_caches = Vec::with_capacity(self.trunk.len());
        for block in &mut self.trunk {
            let (y, cache) = block.forward(&cur.view(), mode)?;
            trunk_caches.push(cache);
            cur = y;
        }
        let per_point = unflat3(cur, b, n);
        let (pooled, argmax) = max_pool_points(&per_point)?;

        let mut cur = pooled;
        let mut head_caches = Vec::with_capacity(self.head.len());
        for block in &mut self.head {
            let (y, cache) = block.forward(&cur.view(), mode)?;
            head_caches.push(cache);
            cur = y;
        }
        let (flat_mats, out_cache) = self.out.forward(&cur.view(), mode)?;
        let mats = flat_mats
            .into_shape_with_order((b, self.dim, self.dim))
            .expect("b·dim² elements");
        Ok((
            mats,
            TNetCache {
                n,
                trunk: trunk_caches,
                argmax,
                head: head_caches,
                out: out_cache,
            },
        ))
    }

    /// Backward from matrix gradients `d_mats: [b, dim, dim]`; accumulates
    /// parameter gradients and returns the gradient w.r.t. the input points.
    pub fn backward(&mut self, cache: &TNetCache<S>, d_mats: &Array3<S>) -> Array3<S> {
        let b = d_mats.dim().0;
        let flat = d_mats
            .view()
            .into_shape_with_order((b, self.dim * self.dim))
            .expect("b·dim² elements");
        let mut cur = self.out.backward(&cache.out, &flat);
        for (block, block_cache) in self.head.iter_mut().zip(&cache.head).rev() {
            cur = block.backward(block_cache, &cur.view());
        }
        let d_per_point = max_pool_points_backward(&cache.argmax, &cur, cache.n);
        let mut cur = flat2(&d_per_point).to_owned();
        for (block, block_cache) in self.trunk.iter_mut().zip(&cache.trunk).rev() {
            cur = block.backward(block_cache, &cur.view());
        }
        unflat3(cur, b, cache.n)
    }

    /// Apply predicted matrices point-wise: `y[i] = x[i] · m[i]`.
    pub fn apply(x: &Array3<S>, mats: &Array3<S>) -> Array3<S> {
        let (b, n, c) = x.dim();
        debug_assert_eq!(mats.dim(), (b, c, c));
        let mut y = Array3::zeros((b, n, c));
        for i in 0..b {
            let xi = x.index_axis(Axis(0), i);
            let mi = mats.index_axis(Axis(0), i);
            y.slice_mut(s![i, .., ..]).assign(&xi.dot(&mi));
        }
        y
    }

    /// Backward of [`TNet::apply`]: returns `(dx, d_mats)`.
    pub fn apply_backward(
        x: &Array3<S>,
        mats: &Array3<S>,
        dy: &Array3<S>,
    ) -> (Array3<S>, Array3<S>) {
        let (b, n, c) = x.dim();
        let mut dx = Array3::zeros((b, n, c));
        let mut d_mats = Array3::zeros((b, c, c));
        for i in 0..b {
            let xi = x.index_axis(Axis(0), i);
            let mi = mats.index_axis(Axis(0), i);
            let dyi = dy.index_axis(Axis(0), i);
            dx.slice_mut(s![i, .., ..]).assign(&dyi.dot(&mi.t()));
            d_mats.slice_mut(s![i, .., ..]).assign(&xi.t().dot(&dyi));
        }
        (dx, d_mats)
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        for (i, block) in self.trunk.iter_mut().enumerate() {
            out.extend(block.named_params_mut(&format!("{prefix}.conv{i}")));
        }
        for (i, block) in self.head.iter_mut().enumerate() {
            out.extend(block.named_params_mut(&format!("{prefix}.fc{i}")));
        }
        out.extend(self.out.named_params_mut(&format!("{prefix}.out")));
        out
    }

    pub fn named_buffers_mut(&mut self, prefix: &str) -> Vec<(String, &mut ndarray::Array1<S>)> {
        let mut out = Vec::new();
        for (i, block) in self.trunk.iter_mut().enumerate() {
            out.extend(block.named_buffers_mut(&format!("{prefix}.conv{i}")));
        }
        for (i, block) in self.head.iter_mut().enumerate() {
            out.extend(block.named_buffers_mut(&format!("{prefix}.fc{i}")));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.trunk
            .iter()
            .chain(&self.head)
            .map(Block::param_count)
            .sum::<usize>()
            + self.out.param_count()
    }
}

/// Orthogonality penalty for feature transforms: the mean over the batch of
/// ‖I − AAᵀ‖²_F, with its gradient −(4/b)·(I − AAᵀ)·A per matrix.
pub fn orthogonality_penalty<S: Scalar>(mats: &Array3<S>) -> (f64, Array3<S>) {
    let (b, c, _) = mats.dim();
    let mut penalty = 0.0f64;
    let mut grad = Array3::zeros(mats.raw_dim());
    let eye = Array2::<S>::eye(c);
    for i in 0..b {
        let a = mats.index_axis(Axis(0), i);
        let residual = &eye - &a.dot(&a.t());
        penalty += residual.iter().map(|v| v.wide() * v.wide()).sum::<f64>();
        let g = residual.dot(&a).mapv(|v| v * S::of(-4.0 / b as f64));
        grad.slice_mut(s![i, .., ..]).assign(&g);
    }
    (penalty / b as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_diff_grad, max_rel_error};
    use crate::rng;
    use ndarray::arr2;

    fn tiny_arch() -> ArchitectureSpec {
        let mut arch = ArchitectureSpec::light(2);
        arch.widths = [3, 3, 4, 4, 6];
        arch.head = [5, 4];
        arch
    }

    #[test]
    fn untrained_tnet_predicts_the_identity() {
        let mut rng = rng::stream(7, &[rng::tag("tnet-test")]);
        let mut net = TNet::<f64>::new(2, &tiny_arch(), &mut rng);
        let x = Array3::from_shape_fn((2, 5, 2), |(i, j, k)| {
            (i * 10 + j * 2 + k) as f64 * 0.1 - 0.4
        });
        let (mats, _) = net.forward(&x, Mode::Eval).unwrap();
        for i in 0..2 {
            let m = mats.index_axis(Axis(0), i);
            assert_eq!(m, arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        }
        // Identity matrices applied point-wise leave the input unchanged.
        let y = TNet::apply(&x, &mats);
        assert_eq!(y, x);
    }

    #[test]
    fn apply_backward_matches_finite_differences() {
        let mut rng = rng::stream(11, &[rng::tag("tnet-apply")]);
        let x = Array3::from_shape_fn((2, 3, 2), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let mats = Array3::from_shape_fn((2, 2, 2), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        // Scalar objective: sum of squares of the transformed points.
        let objective = |x: &Array3<f64>, m: &Array3<f64>| -> f64 {
            TNet::apply(x, m).iter().map(|v| v * v).sum()
        };
        let y = TNet::apply(&x, &mats);
        let dy = y.mapv(|v| 2.0 * v);
        let (dx, dm) = TNet::apply_backward(&x, &mats, &dy);

        let flat_x: Vec<f64> = x.iter().copied().collect();
        let numeric_x = finite_diff_grad(
            |p| {
                let xp = Array3::from_shape_vec(x.raw_dim(), p.to_vec()).unwrap();
                objective(&xp, &mats)
            },
            &flat_x,
            1e-6,
        );
        let analytic_x: Vec<f64> = dx.iter().copied().collect();
        assert!(max_rel_error(&analytic_x, &numeric_x, 1e-8) < 1e-7);

        let flat_m: Vec<f64> = mats.iter().copied().collect();
        let numeric_m = finite_diff_grad(
            |p| {
                let mp = Array3::from_shape_vec(mats.raw_dim(), p.to_vec()).unwrap();
                objective(&x, &mp)
            },
            &flat_m,
            1e-6,
        );
        let analytic_m: Vec<f64> = dm.iter().copied().collect();
        assert!(max_rel_error(&analytic_m, &numeric_m, 1e-8) < 1e-7);
    }

    #[test]
    fn orthogonality_penalty_is_zero_for_rotations() {
        // A rotation matrix satisfies AAᵀ = I exactly (up to rounding).
        let theta = 0.7f64;
        let rot = arr2(&[[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]]);
        let mats = rot.insert_axis(Axis(0));
        let (penalty, grad) = orthogonality_penalty(&mats);
        assert!(penalty < 1e-28);
        assert!(grad.iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn orthogonality_gradient_matches_finite_differences() {
        let mut rng = rng::stream(3, &[rng::tag("orth")]);
        let mats =
            Array3::from_shape_fn((3, 4, 4), |_| rand::Rng::random_range(&mut rng, -0.8..0.8));
        let (_, analytic) = orthogonality_penalty(&mats);
        let flat: Vec<f64> = mats.iter().copied().collect();
        let numeric = finite_diff_grad(
            |p| {
                let mp = Array3::from_shape_vec(mats.raw_dim(), p.to_vec()).unwrap();
                orthogonality_penalty(&mp).0
            },
            &flat,
            1e-6,
        );
        let analytic: Vec<f64> = analytic.iter().copied().collect();
        assert!(max_rel_error(&analytic, &numeric, 1e-8) < 1e-6);
    }

    #[test]
    fn tnet_parameter_gradients_match_finite_differences() {
        let mut init = rng::stream(19, &[rng::tag("tnet-grad")]);
        let arch = tiny_arch();
        let mut net = TNet::<f64>::new(2, &arch, &mut init);
        let x = Array3::from_shape_fn((2, 4, 2), |_| rand::Rng::random_range(&mut init, -1.0..1.0));

        // Objective: sum of squares of the predicted matrices, training mode.
        let (mats, cache) = net.forward(&x, Mode::Train).unwrap();
        let d_mats = mats.mapv(|v| 2.0 * v);
        net.backward(&cache, &d_mats);
        let analytic: Vec<f64> = net
            .named_params_mut("t")
            .iter()
            .flat_map(|(_, t)| t.grad.iter().copied().collect::<Vec<_>>())
            .collect();

        let run = |net: &mut TNet<f64>, x: &Array3<f64>| -> f64 {
            let fresh_buffers: Vec<ndarray::Array1<f64>> = net
                .named_buffers_mut("t")
                .iter()
                .map(|(_, b)| (*b).clone())
                .collect();
            let (mats, _) = net.forward(x, Mode::Train).unwrap();
            // Forward mutates running stats; restore them so each probe sees
            // identical state.
            for ((_, buf), saved) in net.named_buffers_mut("t").into_iter().zip(fresh_buffers) {
                *buf = saved;
            }
            mats.iter().map(|v| v * v).sum()
        };

        let point: Vec<f64> = net
            .named_params_mut("t")
            .iter()
            .flat_map(|(_, t)| t.data.iter().copied().collect::<Vec<_>>())
            .collect();
        let mut probe = net.clone();
        let numeric = finite_diff_grad(
            |p| {
                let mut offset = 0;
                for (_, t) in probe.named_params_mut("t") {
                    let len = t.data.len();
                    let dim = t.data.raw_dim();
                    t.data
                        .assign(&ndarray::ArrayD::from_shape_vec(dim, p[offset..offset + len].to_vec()).unwrap());
                    offset += len;
                }
                run(&mut probe, &x)
            },
            &point,
            1e-5,
        );
        let err = max_rel_error(&analytic, &numeric, 1e-8);
        assert!(err < 1e-6, "max relative error {err}");
    }
}
