//! The shared point-feature trunk and the two task heads built on it: a
//! window classifier (one label per window) and a point segmenter (one
//! label per point).

use ndarray::{Array2, Array3, Axis, s};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::models::block::{Block, BlockCache};
use crate::models::tnet::{TNet, TNetCache, orthogonality_penalty};
use crate::models::ArchitectureSpec;
use crate::nn::layers::{Dropout, flat2, unflat3};
use crate::nn::ops::{max_pool_points, max_pool_points_backward};
use crate::nn::{Mode, Tensor};
use crate::rng;
use crate::scalar::Scalar;

/// Backbone shared by both heads: input transform on the horizontal
/// coordinates, two point MLP layers, feature transform, three more point
/// MLP layers, and a max-pool over points into one global feature.
#[derive(Debug, Clone)]
pub struct PointNetTrunk<S: Scalar> {
    tnet_in: TNet<S>,
    stage_a: Vec<Block<S>>,
    tnet_feat: TNet<S>,
    stage_b: Vec<Block<S>>,
}

/// What the trunk hands to a head.
pub struct TrunkOut<S: Scalar> {
    /// Global window feature `[b, b3]`.
    pub global: Array2<S>,
    /// Aligned per-point features `[b, n, a2]`.
    pub local: Array3<S>,
}

pub struct TrunkCache<S: Scalar> {
    n: usize,
    xy: Array3<S>,
    m_in: Array3<S>,
    tnet_in: TNetCache<S>,
    stage_a: Vec<BlockCache<S>>,
    local_pre: Array3<S>,
    m_feat: Array3<S>,
    tnet_feat: TNetCache<S>,
    stage_b: Vec<BlockCache<S>>,
    argmax: Array2<usize>,
}

impl<S: Scalar> TrunkCache<S> {
    /// Predicted feature-transform matrices `[b, a2, a2]`, the operand of
    /// the orthogonality penalty.
    pub fn feature_transforms(&self) -> &Array3<S> {
        &self.m_feat
    }
}

impl<S: Scalar> PointNetTrunk<S> {
    pub fn new(arch: &ArchitectureSpec, rng: &mut ChaCha8Rng) -> PointNetTrunk<S> {
        let [a1, a2, b1, b2, b3] = arch.widths;
        let fdim = arch.point_feature_dim();
        let tnet_in = TNet::new(2, arch, rng);
        let stage_a = vec![
            Block::hidden(fdim, a1, arch.batchnorm, rng),
            Block::hidden(a1, a2, arch.batchnorm, rng),
        ];
        let tnet_feat = TNet::new(a2, arch, rng);
        let stage_b = vec![
            Block::hidden(a2, b1, arch.batchnorm, rng),
            Block::hidden(b1, b2, arch.batchnorm, rng),
            Block::hidden(b2, b3, arch.batchnorm, rng),
        ];
        PointNetTrunk {
            tnet_in,
            stage_a,
            tnet_feat,
            stage_b,
        }
    }

    /// Run the trunk on `x: [b, n, fdim]` (first two channels are the
    /// horizontal coordinates).
    pub fn forward(&mut self, x: &Array3<S>, mode: Mode) -> Result<(TrunkOut<S>, TrunkCache<S>)> {
        let (b, n, _f) = x.dim();
        let xy = x.slice(s![.., .., 0..2]).to_owned();
        let rest = x.slice(s![.., .., 2..]);

        let (m_in, tnet_in_cache) = self.tnet_in.forward(&xy, mode)?;
        let xy_t = TNet::apply(&xy, &m_in);
        let mut x_cat = Array3::zeros(x.raw_dim());
        x_cat.slice_mut(s![.., .., 0..2]).assign(&xy_t);
        x_cat.slice_mut(s![.., .., 2..]).assign(&rest);

        let mut cur = flat2(&x_cat).to_owned();
        let mut stage_a_caches = Vec::with_capacity(self.stage_a.len());
        for block in &mut self.stage_a {
            let (y, cache) = block.forward(&cur.view(), mode)?;
            stage_a_caches.push(cache);
            cur = y;
        }
        let local_pre = unflat3(cur, b, n);

        let (m_feat, tnet_feat_cache) = self.tnet_feat.forward(&local_pre, mode)?;
        let local = TNet::apply(&local_pre, &m_feat);

        let mut cur = flat2(&local).to_owned();
        let mut stage_b_caches = Vec::with_capacity(self.stage_b.len());
        for block in &mut self.stage_b {
            let (y, cache) = block.forward(&cur.view(), mode)?;
            stage_b_caches.push(cache);
            cur = y;
        }
        let pre_pool = unflat3(cur, b, n);
        let (global, argmax) = max_pool_points(&pre_pool)?;

        Ok((
            TrunkOut {
                global,
                local: local.clone(),
            },
            TrunkCache {
                n,
                xy,
                m_in,
                tnet_in: tnet_in_cache,
                stage_a: stage_a_caches,
                local_pre,
                m_feat,
                tnet_feat: tnet_feat_cache,
                stage_b: stage_b_caches,
                argmax,
            },
        ))
    }

    /// Accumulate parameter gradients from the head gradients. `d_local`
    /// is used by the segmenter; `orth_coeff` scales the orthogonality
    /// penalty folded into the feature-transform gradient.
    pub fn backward(
        &mut self,
        cache: &TrunkCache<S>,
        d_global: &Array2<S>,
        d_local: Option<&Array3<S>>,
        orth_coeff: f64,
    ) {
        let n = cache.n;
        let b = d_global.dim().0;

        let d_pre_pool = max_pool_points_backward(&cache.argmax, d_global, n);
        let mut cur = flat2(&d_pre_pool).to_owned();
        for (block, block_cache) in self.stage_b.iter_mut().zip(&cache.stage_b).rev() {
            cur = block.backward(block_cache, &cur.view());
        }
        let mut d_local_t = unflat3(cur, b, n);
        if let Some(extra) = d_local {
            d_local_t += extra;
        }

        let (d_local_pre_direct, mut d_m_feat) =
            TNet::apply_backward(&cache.local_pre, &cache.m_feat, &d_local_t);
        if orth_coeff != 0.0 {
            let (_, orth_grad) = orthogonality_penalty(&cache.m_feat);
            d_m_feat += &orth_grad.mapv(|v| v * S::of(orth_coeff));
        }
        let d_local_pre_tnet = self.tnet_feat.backward(&cache.tnet_feat, &d_m_feat);
        let d_local_pre = d_local_pre_direct + d_local_pre_tnet;

        let mut cur = flat2(&d_local_pre).to_owned();
        for (block, block_cache) in self.stage_a.iter_mut().zip(&cache.stage_a).rev() {
            cur = block.backward(block_cache, &cur.view());
        }
        let d_x_cat = unflat3(cur, b, n);
        let d_xy_t = d_x_cat.slice(s![.., .., 0..2]).to_owned();

        let (_d_xy, d_m_in) = TNet::apply_backward(&cache.xy, &cache.m_in, &d_xy_t);
        self.tnet_in.backward(&cache.tnet_in, &d_m_in);
    }

    pub fn named_params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        // Callers rely on this order being stable: it defines both the
        // optimizer's moment layout and the checkpoint tensor order.
        out.extend(self.tnet_in.named_params_mut("tnet_in"));
        for (i, block) in self.stage_a.iter_mut().enumerate() {
            out.extend(block.named_params_mut(&format!("stage_a.{i}")));
        }
        out.extend(self.tnet_feat.named_params_mut("tnet_feat"));
        for (i, block) in self.stage_b.iter_mut().enumerate() {
            out.extend(block.named_params_mut(&format!("stage_b.{i}")));
        }
    }

    pub fn named_buffers_mut<'a>(
        &'a mut self,
        out: &mut Vec<(String, &'a mut ndarray::Array1<S>)>,
    ) {
        out.extend(self.tnet_in.named_buffers_mut("tnet_in"));
        for (i, block) in self.stage_a.iter_mut().enumerate() {
            out.extend(block.named_buffers_mut(&format!("stage_a.{i}")));
        }
        out.extend(self.tnet_feat.named_buffers_mut("tnet_feat"));
        for (i, block) in self.stage_b.iter_mut().enumerate() {
            out.extend(block.named_buffers_mut(&format!("stage_b.{i}")));
        }
    }

    pub fn param_count(&self) -> usize {
        self.tnet_in.param_count()
            + self.tnet_feat.param_count()
            + self
                .stage_a
                .iter()
                .chain(&self.stage_b)
                .map(Block::param_count)
                .sum::<usize>()
    }
}

/// Window classifier: trunk + fully connected head on the global feature,
/// with dropout before the logit layer.
#[derive(Debug, Clone)]
pub struct PointNetClassifier<S: Scalar> {
    pub arch: ArchitectureSpec,
    trunk: PointNetTrunk<S>,
    head: Vec<Block<S>>,
    dropout: Dropout,
    out: Block<S>,
}

pub struct ClsCache<S: Scalar> {
    trunk: TrunkCache<S>,
    head: Vec<BlockCache<S>>,
    dropout_mask: Option<Array2<S>>,
    out: BlockCache<S>,
}

impl<S: Scalar> ClsCache<S> {
    /// Feature-transform matrices, for the orthogonality penalty term.
    pub fn feature_transforms(&self) -> &Array3<S> {
        self.trunk.feature_transforms()
    }
}

impl<S: Scalar> PointNetClassifier<S> {
    pub fn new(arch: &ArchitectureSpec, rng: &mut ChaCha8Rng) -> Result<PointNetClassifier<S>> {
        arch.validate()?;
        let trunk = PointNetTrunk::new(arch, rng);
        let b3 = arch.widths[4];
        let head = vec![
            Block::hidden(b3, arch.head[0], arch.batchnorm, rng),
            Block::hidden(arch.head[0], arch.head[1], arch.batchnorm, rng),
        ];
        let dropout = Dropout::new(arch.dropout)?;
        let out = Block::output(arch.head[1], arch.k, rng);
        Ok(PointNetClassifier {
            arch: arch.clone(),
            trunk,
            head,
            dropout,
            out,
        })
    }

    /// Deterministic construction from a seed.
    pub fn with_seed(arch: &ArchitectureSpec, seed: u64) -> Result<PointNetClassifier<S>> {
        let mut rng = rng::stream(seed, &[rng::tag("model-init"), rng::tag("cls")]);
        PointNetClassifier::new(arch, &mut rng)
    }

    /// Logits `[b, k]` for a batch of windows `[b, n, fdim]`. Training mode
    /// with a positive dropout rate needs a random stream.
    pub fn forward(
        &mut self,
        x: &Array3<S>,
        mode: Mode,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<S>, ClsCache<S>)> {
        let (trunk_out, trunk_cache) = self.trunk.forward(x, mode)?;
        let mut cur = trunk_out.global;
        let mut head_caches = Vec::with_capacity(self.head.len());
        for block in &mut self.head {
            let (y, cache) = block.forward(&cur.view(), mode)?;
            head_caches.push(cache);
            cur = y;
        }
        let (dropped, mask) = self.dropout.forward(&cur, mode, dropout_rng)?;
        let (logits, out_cache) = self.out.forward(&dropped.view(), mode)?;
        Ok((
            logits,
            ClsCache {
                trunk: trunk_cache,
                head: head_caches,
                dropout_mask: mask,
                out: out_cache,
            },
        ))
    }

    /// Accumulate parameter gradients from `d_logits: [b, k]`.
    pub fn backward(&mut self, cache: &ClsCache<S>, d_logits: &Array2<S>, orth_coeff: f64) {
        let mut cur = self.out.backward(&cache.out, &d_logits.view());
        if let Some(mask) = cache.dropout_mask.as_ref() {
            cur = self.dropout.backward(mask, &cur.view());
        }
        for (block, block_cache) in self.head.iter_mut().zip(&cache.head).rev() {
            cur = block.backward(block_cache, &cur.view());
        }
        self.trunk.backward(&cache.trunk, &cur, None, orth_coeff);
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        self.trunk.named_params_mut(&mut out);
        for (i, block) in self.head.iter_mut().enumerate() {
            out.extend(block.named_params_mut(&format!("head.{i}")));
        }
        out.extend(self.out.named_params_mut("head.out"));
        out
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut ndarray::Array1<S>)> {
        let mut out = Vec::new();
        self.trunk.named_buffers_mut(&mut out);
        for (i, block) in self.head.iter_mut().enumerate() {
            out.extend(block.named_buffers_mut(&format!("head.{i}")));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count()
            + self.head.iter().map(Block::param_count).sum::<usize>()
            + self.out.param_count()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }
}

/// Point segmenter: trunk + shared MLP over each point's local feature
/// concatenated with the window's global feature.
#[derive(Debug, Clone)]
pub struct PointNetSegmenter<S: Scalar> {
    pub arch: ArchitectureSpec,
    trunk: PointNetTrunk<S>,
    seg: Vec<Block<S>>,
    out: Block<S>,
}

pub struct SegCache<S: Scalar> {
    trunk: TrunkCache<S>,
    seg: Vec<BlockCache<S>>,
    out: BlockCache<S>,
}

impl<S: Scalar> SegCache<S> {
    pub fn feature_transforms(&self) -> &Array3<S> {
        self.trunk.feature_transforms()
    }
}

impl<S: Scalar> PointNetSegmenter<S> {
    pub fn new(arch: &ArchitectureSpec, rng: &mut ChaCha8Rng) -> Result<PointNetSegmenter<S>> {
        arch.validate()?;
        let trunk = PointNetTrunk::new(arch, rng);
        let a2 = arch.widths[1];
        let b3 = arch.widths[4];
        let [s1, s2, s3] = arch.seg_head();
        let seg = vec![
            Block::hidden(a2 + b3, s1, arch.batchnorm, rng),
            Block::hidden(s1, s2, arch.batchnorm, rng),
            Block::hidden(s2, s3, arch.batchnorm, rng),
        ];
        let out = Block::output(s3, arch.k, rng);
        Ok(PointNetSegmenter {
            arch: arch.clone(),
            trunk,
            seg,
            out,
        })
    }

    pub fn with_seed(arch: &ArchitectureSpec, seed: u64) -> Result<PointNetSegmenter<S>> {
        let mut rng = rng::stream(seed, &[rng::tag("model-init"), rng::tag("seg")]);
        PointNetSegmenter::new(arch, &mut rng)
    }

    /// Per-point logits `[b, n, k]` for a batch of windows `[b, n, fdim]`.
    pub fn forward(&mut self, x: &Array3<S>, mode: Mode) -> Result<(Array3<S>, SegCache<S>)> {
        let (b, n, _f) = x.dim();
        let (trunk_out, trunk_cache) = self.trunk.forward(x, mode)?;

        let b3 = trunk_out.global.dim().1;
        let a2 = trunk_out.local.dim().2;
        let mut concat = Array3::zeros((b, n, a2 + b3));
        concat
            .slice_mut(s![.., .., 0..a2])
            .assign(&trunk_out.local);
        for i in 0..b {
            let g = trunk_out.global.index_axis(Axis(0), i);
            let mut dst = concat.slice_mut(s![i, .., a2..]);
            dst.assign(&g.broadcast((n, b3)).expect("broadcast row over points"));
        }

        let mut cur = flat2(&concat).to_owned();
        let mut seg_caches = Vec::with_capacity(self.seg.len());
        for block in &mut self.seg {
            let (y, cache) = block.forward(&cur.view(), mode)?;
            seg_caches.push(cache);
            cur = y;
        }
        let (logits_flat, out_cache) = self.out.forward(&cur.view(), mode)?;
        let logits = unflat3(logits_flat, b, n);
        Ok((
            logits,
            SegCache {
                trunk: trunk_cache,
                seg: seg_caches,
                out: out_cache,
            },
        ))
    }

    /// Accumulate parameter gradients from `d_logits: [b, n, k]`.
    pub fn backward(&mut self, cache: &SegCache<S>, d_logits: &Array3<S>, orth_coeff: f64) {
        let (b, n, _k) = d_logits.dim();
        let a2 = self.arch.widths[1];
        let mut cur = self.out.backward(&cache.out, &flat2(d_logits));
        for (block, block_cache) in self.seg.iter_mut().zip(&cache.seg).rev() {
            cur = block.backward(block_cache, &cur.view());
        }
        let d_concat = unflat3(cur, b, n);
        let d_local = d_concat.slice(s![.., .., 0..a2]).to_owned();
        let d_global = d_concat.slice(s![.., .., a2..]).sum_axis(Axis(1));
        self.trunk
            .backward(&cache.trunk, &d_global, Some(&d_local), orth_coeff);
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        self.trunk.named_params_mut(&mut out);
        for (i, block) in self.seg.iter_mut().enumerate() {
            out.extend(block.named_params_mut(&format!("seg.{i}")));
        }
        out.extend(self.out.named_params_mut("seg.out"));
        out
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut ndarray::Array1<S>)> {
        let mut out = Vec::new();
        self.trunk.named_buffers_mut(&mut out);
        for (i, block) in self.seg.iter_mut().enumerate() {
            out.extend(block.named_buffers_mut(&format!("seg.{i}")));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count()
            + self.seg.iter().map(Block::param_count).sum::<usize>()
            + self.out.param_count()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_diff_grad, max_rel_error};
    use crate::nn::loss::{class_balanced_weights, weighted_nll_loss};
    use crate::nn::ops::{log_softmax, log_softmax_backward};
    use ndarray::Array1;
    use rand::Rng;
    use rand::seq::SliceRandom;

    fn tiny_arch() -> ArchitectureSpec {
        let mut arch = ArchitectureSpec::light(2);
        arch.widths = [3, 3, 4, 4, 6];
        arch.head = [5, 4];
        arch.dropout = 0.0;
        arch
    }

    fn random_batch(b: usize, n: usize, seed: u64) -> Array3<f64> {
        let mut r = rng::stream(seed, &[rng::tag("batch")]);
        Array3::from_shape_fn((b, n, 7), |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn parameter_counts_match_the_architecture_tables() {
        let full = PointNetClassifier::<f32>::with_seed(&ArchitectureSpec::full(2), 0).unwrap();
        let light = PointNetClassifier::<f32>::with_seed(&ArchitectureSpec::light(2), 0).unwrap();
        assert_eq!(full.param_count(), 3_469_190);
        assert_eq!(light.param_count(), 741_318);

        let full_seg = PointNetSegmenter::<f32>::with_seed(&ArchitectureSpec::full(2), 0).unwrap();
        let light_seg = PointNetSegmenter::<f32>::with_seed(&ArchitectureSpec::light(2), 0).unwrap();
        assert_eq!(full_seg.param_count(), 3_534_854);
        assert_eq!(light_seg.param_count(), 757_766);
    }

    #[test]
    fn named_params_cover_every_parameter_exactly_once() {
        let mut model = PointNetClassifier::<f32>::with_seed(&tiny_arch(), 1).unwrap();
        let total = model.param_count();
        let params = model.named_params_mut();
        let mut seen = std::collections::BTreeSet::new();
        let mut counted = 0;
        for (name, t) in &params {
            assert!(seen.insert(name.clone()), "duplicate name {name}");
            counted += t.data.len();
        }
        assert_eq!(counted, total);
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        let arch = tiny_arch();
        let mut model = PointNetClassifier::<f64>::with_seed(&arch, 5).unwrap();
        let x = random_batch(2, 4, 21);
        let targets = vec![0usize, 1];
        let weights = class_balanced_weights(&[3, 5], 0.9).unwrap();
        let coeff = 0.001;

        let loss_of = |model: &mut PointNetClassifier<f64>| -> f64 {
            let (logits, cache) = model.forward(&x, Mode::Train, None).unwrap();
            let lp = log_softmax(&logits);
            let (nll, _) = weighted_nll_loss(&lp, &targets, &weights).unwrap();
            nll + coeff * orthogonality_penalty(cache.feature_transforms()).0
        };

        model.zero_grad();
        let (logits, cache) = model.forward(&x, Mode::Train, None).unwrap();
        let lp = log_softmax(&logits);
        let (_, d_lp) = weighted_nll_loss(&lp, &targets, &weights).unwrap();
        let d_logits = log_softmax_backward(&lp, &d_lp);
        model.backward(&cache, &d_logits, coeff);
        let analytic: Vec<f64> = model
            .named_params_mut()
            .iter()
            .flat_map(|(_, t)| t.grad.iter().copied().collect::<Vec<_>>())
            .collect();

        let point: Vec<f64> = model
            .named_params_mut()
            .iter()
            .flat_map(|(_, t)| t.data.iter().copied().collect::<Vec<_>>())
            .collect();
        let mut probe = model.clone();
        let numeric = finite_diff_grad(
            |p| {
                let mut offset = 0;
                for (_, t) in probe.named_params_mut() {
                    let len = t.data.len();
                    let dim = t.data.raw_dim();
                    t.data.assign(
                        &ndarray::ArrayD::from_shape_vec(dim, p[offset..offset + len].to_vec())
                            .unwrap(),
                    );
                    offset += len;
                }
                loss_of(&mut probe)
            },
            &point,
            1e-5,
        );
        let err = max_rel_error(&analytic, &numeric, 3e-7);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn segmenter_gradients_match_finite_differences() {
        let arch = tiny_arch();
        let mut model = PointNetSegmenter::<f64>::with_seed(&arch, 6).unwrap();
        let x = random_batch(2, 3, 22);
        let targets = vec![0usize, 1, 1, 0, 0, 1];
        let weights = class_balanced_weights(&[4, 2], 0.99).unwrap();
        let coeff = 0.001;

        let loss_of = |model: &mut PointNetSegmenter<f64>| -> f64 {
            let (logits, cache) = model.forward(&x, Mode::Train).unwrap();
            let lp = log_softmax(&flat2(&logits).to_owned());
            let (nll, _) = weighted_nll_loss(&lp, &targets, &weights).unwrap();
            nll + coeff * orthogonality_penalty(cache.feature_transforms()).0
        };

        model.zero_grad();
        let (logits, cache) = model.forward(&x, Mode::Train).unwrap();
        let lp = log_softmax(&flat2(&logits).to_owned());
        let (_, d_lp) = weighted_nll_loss(&lp, &targets, &weights).unwrap();
        let d_flat = log_softmax_backward(&lp, &d_lp);
        let d_logits = unflat3(d_flat, 2, 3);
        model.backward(&cache, &d_logits, coeff);
        let analytic: Vec<f64> = model
            .named_params_mut()
            .iter()
            .flat_map(|(_, t)| t.grad.iter().copied().collect::<Vec<_>>())
            .collect();

        let point: Vec<f64> = model
            .named_params_mut()
            .iter()
            .flat_map(|(_, t)| t.data.iter().copied().collect::<Vec<_>>())
            .collect();
        let mut probe = model.clone();
        let numeric = finite_diff_grad(
            |p| {
                let mut offset = 0;
                for (_, t) in probe.named_params_mut() {
                    let len = t.data.len();
                    let dim = t.data.raw_dim();
                    t.data.assign(
                        &ndarray::ArrayD::from_shape_vec(dim, p[offset..offset + len].to_vec())
                            .unwrap(),
                    );
                    offset += len;
                }
                loss_of(&mut probe)
            },
            &point,
            1e-5,
        );
        let err = max_rel_error(&analytic, &numeric, 3e-7);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn eval_logits_are_bitwise_invariant_to_point_order_and_duplication() {
        let arch = tiny_arch();
        let mut model = PointNetClassifier::<f32>::with_seed(&arch, 9).unwrap();
        let mut r = rng::stream(33, &[rng::tag("perm")]);
        let x = Array3::from_shape_fn((1, 50, 7), |_| r.random_range(-1.0f32..1.0));
        let (base, _) = model.forward(&x, Mode::Eval, None).unwrap();

        // Permutation.
        let mut order: Vec<usize> = (0..50).collect();
        order.shuffle(&mut r);
        let mut permuted = x.clone();
        for (dst, &src) in order.iter().enumerate() {
            permuted
                .slice_mut(s![0, dst, ..])
                .assign(&x.slice(s![0, src, ..]));
        }
        let (perm_logits, _) = model.forward(&permuted, Mode::Eval, None).unwrap();
        assert_eq!(base, perm_logits, "permutation changed eval logits");

        // Duplication: repeat a third of the points.
        let mut rows: Vec<usize> = (0..50).collect();
        rows.extend((0..50).step_by(3));
        let mut dup = Array3::zeros((1, rows.len(), 7));
        for (dst, &src) in rows.iter().enumerate() {
            dup.slice_mut(s![0, dst, ..]).assign(&x.slice(s![0, src, ..]));
        }
        let (dup_logits, _) = model.forward(&dup, Mode::Eval, None).unwrap();
        assert_eq!(base, dup_logits, "duplication changed eval logits");
    }

    #[test]
    fn eval_forward_never_mutates_the_model() {
        let arch = tiny_arch();
        let mut model = PointNetClassifier::<f32>::with_seed(&arch, 13).unwrap();
        let before: Vec<Array1<f32>> = model
            .named_buffers_mut()
            .iter()
            .map(|(_, b)| (*b).clone())
            .collect();
        let x = Array3::from_shape_fn((2, 6, 7), |(i, j, k)| (i + j + k) as f32 * 0.05);
        model.forward(&x, Mode::Eval, None).unwrap();
        let after: Vec<Array1<f32>> = model
            .named_buffers_mut()
            .iter()
            .map(|(_, b)| (*b).clone())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn train_mode_dropout_requires_a_stream() {
        let mut arch = tiny_arch();
        arch.dropout = 0.3;
        let mut model = PointNetClassifier::<f32>::with_seed(&arch, 2).unwrap();
        let x = Array3::from_shape_fn((2, 5, 7), |(i, j, k)| (i * 35 + j * 7 + k) as f32 * 0.01);
        assert!(model.forward(&x, Mode::Train, None).is_err());
        let mut stream = rng::stream(0, &[rng::tag("dropout")]);
        assert!(model.forward(&x, Mode::Train, Some(&mut stream)).is_ok());
    }

    #[test]
    fn segmenter_labels_every_point() {
        let arch = tiny_arch();
        let mut model = PointNetSegmenter::<f32>::with_seed(&arch, 3).unwrap();
        let x = Array3::from_shape_fn((2, 9, 7), |(i, j, k)| ((i + 2 * j) as f32 - k as f32) * 0.1);
        let (logits, _) = model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(logits.dim(), (2, 9, 2));
        assert!(logits.iter().all(|v| v.is_finite()));
    }
}
