//! Dataset assembly and the training loop: positive doubling, background
//! subsampling, class-balanced batches, plateau scheduling, early stopping,
//! and best-checkpoint selection.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array3, ArrayD, s};
use rand::Rng;

use crate::cloud::Window;
use crate::error::{Error, Result};
use crate::models::{
    ArchitectureSpec, PointNetClassifier, PointNetSegmenter, Variant, orthogonality_penalty,
};
use crate::nn::Mode;
use crate::nn::layers::{flat2, unflat3};
use crate::nn::loss::{ClassWeights, class_balanced_weights, weighted_nll_loss};
use crate::nn::ops::{log_softmax, log_softmax_backward};
use crate::nn::optim::{Adam, AdamConfig, PlateauConfig};
use crate::preprocess::{FEATURE_DIM, FeatureMatrix};
use crate::rng;
use crate::sampling::{SamplerConfig, SamplerMode, augment_xy_jitter, sample_window};
use crate::scalar::Scalar;

/// Coefficient of the feature-transform orthogonality penalty.
pub const ORTH_PENALTY_COEFF: f64 = 0.001;
/// Maximum planar shift (m) applied to the jittered copy of each positive.
pub const JITTER_MAX_SHIFT: f64 = 2.0;
/// Fraction of train windows carved off for validation.
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;
/// Minimum decrease of the validation loss that counts as an improvement
/// for early stopping (matches the plateau schedule's threshold).
pub const EARLY_STOP_MIN_DELTA: f64 = 1e-6;

/// Class index of the negative (background / non-tower) class.
pub const LABEL_OTHER: usize = 0;
/// Class index of the positive (tower) class.
pub const LABEL_TOWER: usize = 1;

/// Hyperparameters shared by both training tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Points per window fed to the network.
    pub n_points: usize,
    pub initial_lr: f64,
    pub plateau_patience: u32,
    pub early_stop_patience: u32,
    /// Class-balancing exponent; 0 means uniform weights.
    pub beta: f64,
    pub sampler_mode: SamplerMode,
    /// When false, the green/blue/NDVI feature columns are zeroed.
    pub use_color_nir: bool,
    pub variant: Variant,
    pub seed: u64,
    /// Fraction of tower-free windows kept in the segmentation set.
    pub background_keep_fraction_seg: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            n_points: 2048,
            initial_lr: 0.001,
            plateau_patience: 10,
            early_stop_patience: 10,
            beta: 0.999,
            sampler_mode: SamplerMode::Constrained,
            use_color_nir: true,
            variant: Variant::Light,
            seed: 0,
            background_keep_fraction_seg: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.n_points == 0 {
            return Err(Error::Config(
                "epochs, batch_size and n_points must all be positive".into(),
            ));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::Config(format!(
                "initial_lr must be positive and finite, got {}",
                self.initial_lr
            )));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "beta must lie in [0, 1), got {}",
                self.beta
            )));
        }
        if !(0.0..=1.0).contains(&self.background_keep_fraction_seg) {
            return Err(Error::Config(format!(
                "background_keep_fraction_seg must lie in [0, 1], got {}",
                self.background_keep_fraction_seg
            )));
        }
        Ok(())
    }

    /// Sampler settings induced by this configuration.
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            n_target: self.n_points,
            mode: self.sampler_mode,
            seed: self.seed,
            ..SamplerConfig::default()
        }
    }

    /// Network architecture induced by this configuration.
    pub fn architecture(&self) -> ArchitectureSpec {
        let mut arch = match self.variant {
            Variant::Light => ArchitectureSpec::light(2),
            Variant::Full => ArchitectureSpec::full(2),
        };
        arch.color = self.use_color_nir;
        arch
    }
}

/// One epoch's bookkeeping row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Per-epoch record of a completed training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_loss).fold(None, |acc, v| {
            Some(acc.map_or(v, |a: f64| a.min(v)))
        })
    }

    /// CSV rendering: `epoch,train_loss,val_loss,lr,seconds`. The seconds
    /// column is wall-clock measurement and is not reproducible run to run.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                e.epoch, e.train_loss, e.val_loss, e.lr, e.seconds
            ));
        }
        out
    }
}

/// One classification example: a sampled, normalized window and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsSample<S: Scalar> {
    pub features: FeatureMatrix<S>,
    pub label: usize,
}

/// One segmentation example: a sampled, normalized window and one label per
/// retained point.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample<S: Scalar> {
    pub features: FeatureMatrix<S>,
    pub labels: Vec<usize>,
}

/// Split windows into train and validation sets, stratified by source block:
/// every block contributes `floor(fraction · windows)` of its windows to
/// validation (at least one window overall). Deterministic per seed.
pub fn carve_validation(
    windows: Vec<Window>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Window>, Vec<Window>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "validation fraction must lie in [0, 1), got {fraction}"
        )));
    }
    if fraction == 0.0 {
        return Ok((windows, Vec::new()));
    }
    let mut by_block: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        by_block.entry(&w.source_block_id).or_default().push(i);
    }
    let mut val_indices: Vec<usize> = Vec::new();
    for (block, indices) in &by_block {
        let n_val = (fraction * indices.len() as f64).floor() as usize;
        if n_val == 0 {
            continue;
        }
        let mut pool = indices.clone();
        let mut r = rng::stream(seed, &[rng::tag("val-carve"), rng::tag(block)]);
        for i in 0..n_val {
            let j = r.random_range(i..pool.len());
            pool.swap(i, j);
        }
        val_indices.extend_from_slice(&pool[..n_val]);
    }
    // Guarantee a non-empty validation set when there is anything to spare:
    // take one window from the largest block.
    if val_indices.is_empty() {
        if let Some((block, indices)) = by_block.iter().max_by_key(|(_, v)| v.len()) {
            if indices.len() >= 2 {
                let mut r = rng::stream(seed, &[rng::tag("val-carve"), rng::tag(block)]);
                val_indices.push(indices[r.random_range(0..indices.len())]);
            }
        }
    }
    val_indices.sort_unstable();
    let in_val: std::collections::BTreeSet<usize> = val_indices.iter().copied().collect();
    let mut train = Vec::with_capacity(windows.len() - in_val.len());
    let mut val = Vec::with_capacity(in_val.len());
    for (i, w) in windows.into_iter().enumerate() {
        if in_val.contains(&i) {
            val.push(w);
        } else {
            train.push(w);
        }
    }
    Ok((train, val))
}

fn features_of<S: Scalar>(
    window: &Window,
    sampler: &SamplerConfig,
    use_color_nir: bool,
) -> Result<FeatureMatrix<S>> {
    let sampled = sample_window(window, sampler)?;
    let mut features = crate::preprocess::normalize_unit_sphere(&sampled)?;
    if !use_color_nir {
        features.zero_color_channels();
    }
    Ok(features)
}

/// The positive window plus its jittered copy; falls back to the original
/// when the shift empties the footprint.
fn jittered_copy(window: &Window, seed: u64) -> Window {
    match augment_xy_jitter(window, JITTER_MAX_SHIFT, seed) {
        Ok(w) if !w.is_empty() => w,
        _ => window.clone(),
    }
}

/// Build the window-classification dataset: every tower-containing window
/// plus one jittered copy (label 1), every tower-free window once (label 0).
pub fn assemble_classification_set<S: Scalar>(
    windows: &[Window],
    cfg: &TrainConfig,
) -> Result<Vec<ClsSample<S>>> {
    cfg.validate()?;
    let sampler = cfg.sampler();
    let mut samples = Vec::new();
    let mut positives = 0usize;
    for window in windows.iter().filter(|w| w.contains_target) {
        positives += 1;
        for w in [window.clone(), jittered_copy(window, cfg.seed)] {
            samples.push(ClsSample {
                features: features_of(&w, &sampler, cfg.use_color_nir)?,
                label: LABEL_TOWER,
            });
        }
    }
    if positives == 0 {
        return Err(Error::InvalidData(
            "classification set has no tower-containing windows".into(),
        ));
    }
    for window in windows.iter().filter(|w| !w.contains_target) {
        samples.push(ClsSample {
            features: features_of(window, &sampler, cfg.use_color_nir)?,
            label: LABEL_OTHER,
        });
    }
    Ok(samples)
}

fn point_labels(window: &Window) -> Vec<usize> {
    window
        .points
        .iter()
        .map(|p| {
            if p.label == crate::cloud::ClassLabel::Tower {
                LABEL_TOWER
            } else {
                LABEL_OTHER
            }
        })
        .collect()
}

/// Build the point-segmentation dataset: tower-containing windows (plus one
/// jittered copy each) with per-point tower/other labels, and a seeded
/// subsample of tower-free windows reduced to
/// `background_keep_fraction_seg`.
pub fn assemble_segmentation_set<S: Scalar>(
    windows: &[Window],
    cfg: &TrainConfig,
) -> Result<Vec<SegSample<S>>> {
    cfg.validate()?;
    let sampler = cfg.sampler();
    let mut samples = Vec::new();
    let mut positives = 0usize;
    for window in windows.iter().filter(|w| w.contains_target) {
        positives += 1;
        for w in [window.clone(), jittered_copy(window, cfg.seed)] {
            let sampled = sample_window(&w, &sampler)?;
            let labels = point_labels(&sampled);
            let mut features = crate::preprocess::normalize_unit_sphere(&sampled)?;
            if !cfg.use_color_nir {
                features.zero_color_channels();
            }
            samples.push(SegSample { features, labels });
        }
    }
    if positives == 0 {
        return Err(Error::InvalidData(
            "segmentation set has no tower-containing windows".into(),
        ));
    }

    let negatives: Vec<&Window> = windows.iter().filter(|w| !w.contains_target).collect();
    let keep = (negatives.len() as f64 * cfg.background_keep_fraction_seg).round() as usize;
    let mut order: Vec<usize> = (0..negatives.len()).collect();
    let mut r = rng::stream(cfg.seed, &[rng::tag("seg-background")]);
    for i in 0..keep.min(order.len()) {
        let j = r.random_range(i..order.len());
        order.swap(i, j);
    }
    let mut kept: Vec<usize> = order[..keep.min(order.len())].to_vec();
    kept.sort_unstable();
    for idx in kept {
        let sampled = sample_window(negatives[idx], &sampler)?;
        let labels = point_labels(&sampled);
        let mut features = crate::preprocess::normalize_unit_sphere(&sampled)?;
        if !cfg.use_color_nir {
            features.zero_color_channels();
        }
        samples.push(SegSample { features, labels });
    }
    Ok(samples)
}

/// Deterministic per-epoch shuffle order.
pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &[rng::tag("epoch-order"), epoch as u64]);
    for i in 0..n.saturating_sub(1) {
        let j = r.random_range(i..n);
        order.swap(i, j);
    }
    order
}

pub(crate) fn dropout_stream(seed: u64, epoch: usize) -> rand_chacha::ChaCha8Rng {
    rng::stream(seed, &[rng::tag("dropout"), epoch as u64])
}

/// Cut a shuffled index order into batches; a trailing singleton is folded
/// into the previous batch because batch statistics need at least two rows.
fn batches_of(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

struct EarlyStop {
    best: f64,
    stale: u32,
    patience: u32,
}

impl EarlyStop {
    fn new(patience: u32) -> EarlyStop {
        EarlyStop {
            best: f64::INFINITY,
            stale: 0,
            patience,
        }
    }

    /// Returns `(improved, stop_now)`.
    fn observe(&mut self, val: f64) -> (bool, bool) {
        if val < self.best - EARLY_STOP_MIN_DELTA {
            self.best = val;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }
}

type ModelSnapshot<S> = (Vec<ArrayD<S>>, Vec<Array1<S>>);

fn snap_params<S: Scalar>(params: Vec<(String, &mut crate::nn::Tensor<S>)>) -> Vec<ArrayD<S>> {
    params.into_iter().map(|(_, t)| t.data.clone()).collect()
}

fn snap_buffers<S: Scalar>(buffers: Vec<(String, &mut Array1<S>)>) -> Vec<Array1<S>> {
    buffers.into_iter().map(|(_, b)| b.clone()).collect()
}

fn restore_params<S: Scalar>(
    params: Vec<(String, &mut crate::nn::Tensor<S>)>,
    saved: &[ArrayD<S>],
) {
    for ((_, t), s) in params.into_iter().zip(saved) {
        t.data.assign(s);
    }
}

fn restore_buffers<S: Scalar>(buffers: Vec<(String, &mut Array1<S>)>, saved: &[Array1<S>]) {
    for ((_, b), s) in buffers.into_iter().zip(saved) {
        b.assign(s);
    }
}

fn stack_features<S: Scalar>(features: &[&FeatureMatrix<S>]) -> Result<Array3<S>> {
    let n = features[0].n();
    if let Some(bad) = features.iter().find(|f| f.n() != n) {
        return Err(Error::InvalidData(format!(
            "all samples must share one point count; found {} and {n}",
            bad.n()
        )));
    }
    let mut x = Array3::<S>::zeros((features.len(), n, FEATURE_DIM));
    for (i, f) in features.iter().enumerate() {
        if f.data.iter().any(|v| !v.wide().is_finite()) {
            return Err(Error::InvalidData(format!(
                "sample {i} in this batch carries a non-finite feature value"
            )));
        }
        x.slice_mut(s![i, .., ..]).assign(&f.data);
    }
    Ok(x)
}

/// Sum of realized target weights, the denominator of the weighted mean.
fn weight_mass(targets: &[usize], weights: &ClassWeights) -> f64 {
    targets.iter().map(|&t| weights.weights[t]).sum()
}

fn check_finite(loss: f64, what: &str, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Train(format!(
            "{what} loss diverged to {loss} at epoch {epoch}, batch {batch}; \
             lower the learning rate or check the input features"
        )))
    }
}

/// Class counts over window labels.
pub fn classification_counts<S: Scalar>(samples: &[ClsSample<S>]) -> [u64; 2] {
    let mut counts = [0u64; 2];
    for s in samples {
        counts[s.label] += 1;
    }
    counts
}

/// Class counts over point labels.
pub fn segmentation_counts<S: Scalar>(samples: &[SegSample<S>]) -> [u64; 2] {
    let mut counts = [0u64; 2];
    for s in samples {
        for &l in &s.labels {
            counts[l] += 1;
        }
    }
    counts
}

/// Train the window classifier; returns the model restored to its best
/// validation epoch, together with the per-epoch history.
pub fn train_classifier<S: Scalar>(
    train: &[ClsSample<S>],
    val: &[ClsSample<S>],
    cfg: &TrainConfig,
) -> Result<(PointNetClassifier<S>, TrainHistory)> {
    train_classifier_with_arch(&cfg.architecture(), train, val, cfg)
}

/// [`train_classifier`] with an explicit architecture (ablations, tests).
pub fn train_classifier_with_arch<S: Scalar>(
    arch: &ArchitectureSpec,
    train: &[ClsSample<S>],
    val: &[ClsSample<S>],
    cfg: &TrainConfig,
) -> Result<(PointNetClassifier<S>, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Train(
            "both train and validation sets must be non-empty".into(),
        ));
    }
    let weights = class_balanced_weights(&classification_counts(train), cfg.beta)?;
    let mut model = PointNetClassifier::<S>::with_seed(arch, cfg.seed)?;
    let mut adam = Adam::new(
        cfg.initial_lr,
        AdamConfig::default(),
        PlateauConfig {
            patience: cfg.plateau_patience,
            ..PlateauConfig::default()
        },
    )?;
    let mut stopper = EarlyStop::new(cfg.early_stop_patience);
    let mut best: Option<ModelSnapshot<S>> = None;
    let mut history = TrainHistory::default();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut dropout = dropout_stream(cfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        for (batch_no, batch) in batches_of(&order, cfg.batch_size).iter().enumerate() {
            let feats: Vec<&FeatureMatrix<S>> = batch.iter().map(|&i| &train[i].features).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let x = stack_features(&feats)?;
            let (logits, cache) = model.forward(&x, Mode::Train, Some(&mut dropout))?;
            let lp = log_softmax(&logits);
            let (nll, d_lp) = weighted_nll_loss(&lp, &targets, &weights)?;
            let (penalty, _) = orthogonality_penalty(cache.feature_transforms());
            let batch_loss = nll + ORTH_PENALTY_COEFF * penalty;
            check_finite(batch_loss, "training", epoch, batch_no)?;
            model.zero_grad();
            let d_logits = log_softmax_backward(&lp, &d_lp);
            model.backward(&cache, &d_logits, ORTH_PENALTY_COEFF);
            adam.step(&mut model.named_params_mut())?;
            loss_sum += batch_loss * batch.len() as f64;
            loss_count += batch.len();
        }
        let train_loss = loss_sum / loss_count as f64;

        let val_loss = classifier_val_loss(&mut model, val, &weights, cfg.batch_size)?;
        check_finite(val_loss, "validation", epoch, 0)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr: adam.learning_rate,
            seconds: started.elapsed().as_secs_f64(),
        });

        let (improved, stop) = stopper.observe(val_loss);
        if improved || best.is_none() {
            let params = snap_params(model.named_params_mut());
            let buffers = snap_buffers(model.named_buffers_mut());
            best = Some((params, buffers));
        }
        adam.observe_validation(val_loss);
        if stop {
            break;
        }
    }

    if let Some((params, buffers)) = &best {
        restore_params(model.named_params_mut(), params);
        restore_buffers(model.named_buffers_mut(), buffers);
    }
    Ok((model, history))
}

/// Weighted NLL of the classifier over a whole dataset in evaluation mode
/// (no penalty term, no dropout); exact regardless of batch partitioning.
pub fn classifier_val_loss<S: Scalar>(
    model: &mut PointNetClassifier<S>,
    samples: &[ClsSample<S>],
    weights: &ClassWeights,
    batch_size: usize,
) -> Result<f64> {
    let mut loss_mass = 0.0f64;
    let mut weight_total = 0.0f64;
    let indices: Vec<usize> = (0..samples.len()).collect();
    for batch in indices.chunks(batch_size.max(1)) {
        let feats: Vec<&FeatureMatrix<S>> = batch.iter().map(|&i| &samples[i].features).collect();
        let targets: Vec<usize> = batch.iter().map(|&i| samples[i].label).collect();
        let x = stack_features(&feats)?;
        let (logits, _) = model.forward(&x, Mode::Eval, None)?;
        let lp = log_softmax(&logits);
        let (nll, _) = weighted_nll_loss(&lp, &targets, weights)?;
        let mass = weight_mass(&targets, weights);
        loss_mass += nll * mass;
        weight_total += mass;
    }
    Ok(loss_mass / weight_total)
}

/// Train the point segmenter; returns the model restored to its best
/// validation epoch, together with the per-epoch history.
pub fn train_segmenter<S: Scalar>(
    train: &[SegSample<S>],
    val: &[SegSample<S>],
    cfg: &TrainConfig,
) -> Result<(PointNetSegmenter<S>, TrainHistory)> {
    train_segmenter_with_arch(&cfg.architecture(), train, val, cfg)
}

/// [`train_segmenter`] with an explicit architecture (ablations, tests).
pub fn train_segmenter_with_arch<S: Scalar>(
    arch: &ArchitectureSpec,
    train: &[SegSample<S>],
    val: &[SegSample<S>],
    cfg: &TrainConfig,
) -> Result<(PointNetSegmenter<S>, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Train(
            "both train and validation sets must be non-empty".into(),
        ));
    }
    let weights = class_balanced_weights(&segmentation_counts(train), cfg.beta)?;
    let mut model = PointNetSegmenter::<S>::with_seed(arch, cfg.seed)?;
    let mut adam = Adam::new(
        cfg.initial_lr,
        AdamConfig::default(),
        PlateauConfig {
            patience: cfg.plateau_patience,
            ..PlateauConfig::default()
        },
    )?;
    let mut stopper = EarlyStop::new(cfg.early_stop_patience);
    let mut best: Option<ModelSnapshot<S>> = None;
    let mut history = TrainHistory::default();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        for (batch_no, batch) in batches_of(&order, cfg.batch_size).iter().enumerate() {
            let feats: Vec<&FeatureMatrix<S>> = batch.iter().map(|&i| &train[i].features).collect();
            let mut targets = Vec::new();
            for &i in batch {
                targets.extend_from_slice(&train[i].labels);
            }
            let x = stack_features(&feats)?;
            let (b, n) = (x.dim().0, x.dim().1);
            let (logits, cache) = model.forward(&x, Mode::Train)?;
            let lp = log_softmax(&flat2(&logits).to_owned());
            let (nll, d_lp) = weighted_nll_loss(&lp, &targets, &weights)?;
            let (penalty, _) = orthogonality_penalty(cache.feature_transforms());
            let batch_loss = nll + ORTH_PENALTY_COEFF * penalty;
            check_finite(batch_loss, "training", epoch, batch_no)?;
            model.zero_grad();
            let d_logits = unflat3(log_softmax_backward(&lp, &d_lp), b, n);
            model.backward(&cache, &d_logits, ORTH_PENALTY_COEFF);
            adam.step(&mut model.named_params_mut())?;
            loss_sum += batch_loss * batch.len() as f64;
            loss_count += batch.len();
        }
        let train_loss = loss_sum / loss_count as f64;

        let val_loss = segmenter_val_loss(&mut model, val, &weights, cfg.batch_size)?;
        check_finite(val_loss, "validation", epoch, 0)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr: adam.learning_rate,
            seconds: started.elapsed().as_secs_f64(),
        });

        let (improved, stop) = stopper.observe(val_loss);
        if improved || best.is_none() {
            let params = snap_params(model.named_params_mut());
            let buffers = snap_buffers(model.named_buffers_mut());
            best = Some((params, buffers));
        }
        adam.observe_validation(val_loss);
        if stop {
            break;
        }
    }

    if let Some((params, buffers)) = &best {
        restore_params(model.named_params_mut(), params);
        restore_buffers(model.named_buffers_mut(), buffers);
    }
    Ok((model, history))
}

/// Weighted NLL of the segmenter over a whole dataset in evaluation mode.
pub fn segmenter_val_loss<S: Scalar>(
    model: &mut PointNetSegmenter<S>,
    samples: &[SegSample<S>],
    weights: &ClassWeights,
    batch_size: usize,
) -> Result<f64> {
    let mut loss_mass = 0.0f64;
    let mut weight_total = 0.0f64;
    let indices: Vec<usize> = (0..samples.len()).collect();
    for batch in indices.chunks(batch_size.max(1)) {
        let feats: Vec<&FeatureMatrix<S>> = batch.iter().map(|&i| &samples[i].features).collect();
        let mut targets = Vec::new();
        for &i in batch {
            targets.extend_from_slice(&samples[i].labels);
        }
        let x = stack_features(&feats)?;
        let (logits, _) = model.forward(&x, Mode::Eval)?;
        let lp = log_softmax(&flat2(&logits).to_owned());
        let (nll, _) = weighted_nll_loss(&lp, &targets, weights)?;
        let mass = weight_mass(&targets, weights);
        loss_mass += nll * mass;
        weight_total += mass;
    }
    Ok(loss_mass / weight_total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{ClassLabel, PointRecord};
    use ndarray::Array2;

    fn pt(x: f32, y: f32, z: f32, label: ClassLabel) -> PointRecord {
        PointRecord {
            x,
            y,
            z,
            intensity: 0.5,
            red: 0.25,
            green: 0.4,
            blue: 0.3,
            nir: 0.75,
            label,
        }
    }

    /// A window centred at `(cx, cy)` with `n` clutter points and, when
    /// `with_tower`, 4 tower points.
    fn mk_window(block: &str, cx: f64, cy: f64, n: usize, with_tower: bool) -> Window {
        let mut points = Vec::new();
        for i in 0..n {
            let fx = (i % 7) as f32 - 3.0;
            let fy = (i % 5) as f32 - 2.0;
            let fz = 0.5 + (i % 9) as f32;
            points.push(pt(cx as f32 + fx, cy as f32 + fy, fz, ClassLabel::Background));
        }
        if with_tower {
            for k in 0..4 {
                points.push(pt(cx as f32, cy as f32, 5.0 + k as f32 * 3.0, ClassLabel::Tower));
            }
        }
        Window::new(cx, cy, 40.0, points, block).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            n_points: 16,
            ..TrainConfig::default()
        }
    }

    fn tiny_arch() -> ArchitectureSpec {
        ArchitectureSpec {
            widths: [8, 8, 8, 16, 32],
            head: [16, 8],
            ..ArchitectureSpec::light(2)
        }
    }

    #[test]
    fn positives_double_and_negatives_pass_through() {
        let mut windows = Vec::new();
        for i in 0..5 {
            windows.push(mk_window("a", 20.0 + 100.0 * i as f64, 20.0, 30, true));
        }
        for i in 0..100 {
            windows.push(mk_window("a", 20.0 + 100.0 * i as f64, 220.0, 30, false));
        }
        let cfg = tiny_cfg();
        let set = assemble_classification_set::<f32>(&windows, &cfg).unwrap();
        let positives = set.iter().filter(|s| s.label == LABEL_TOWER).count();
        let negatives = set.iter().filter(|s| s.label == LABEL_OTHER).count();
        assert_eq!(positives, 10);
        assert_eq!(negatives, 100);
        assert!(set.iter().all(|s| s.features.n() == cfg.n_points));
    }

    #[test]
    fn disabling_color_zeroes_the_spectral_columns() {
        let windows = vec![
            mk_window("a", 20.0, 20.0, 30, true),
            mk_window("a", 120.0, 20.0, 30, false),
        ];
        let cfg = TrainConfig {
            use_color_nir: false,
            ..tiny_cfg()
        };
        let set = assemble_classification_set::<f32>(&windows, &cfg).unwrap();
        for s in &set {
            for col in [
                crate::preprocess::COL_GREEN,
                crate::preprocess::COL_BLUE,
                crate::preprocess::COL_NDVI,
            ] {
                assert!(s.features.data.column(col).iter().all(|&v| v == 0.0));
            }
            // Geometry and intensity survive.
            assert!(s.features.data.column(crate::preprocess::COL_Z).iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn datasets_without_positives_are_rejected() {
        let windows = vec![mk_window("a", 20.0, 20.0, 30, false)];
        let cfg = tiny_cfg();
        assert!(assemble_classification_set::<f32>(&windows, &cfg).is_err());
        assert!(assemble_segmentation_set::<f32>(&windows, &cfg).is_err());
    }

    #[test]
    fn segmentation_background_reduces_to_the_configured_fraction() {
        let mut windows = vec![mk_window("a", 20.0, 20.0, 30, true)];
        for i in 0..100 {
            windows.push(mk_window("a", 20.0 + 50.0 * i as f64, 220.0, 30, false));
        }
        let cfg = tiny_cfg();
        let set = assemble_segmentation_set::<f32>(&windows, &cfg).unwrap();
        // 1 positive doubled + round(100 · 0.05) backgrounds.
        assert_eq!(set.len(), 2 + 5);
        assert!(set.iter().all(|s| s.labels.len() == cfg.n_points));
        assert!(set.iter().all(|s| s.features.n() == cfg.n_points));

        // Deterministic per seed; a different seed picks different windows.
        let again = assemble_segmentation_set::<f32>(&windows, &cfg).unwrap();
        assert_eq!(set, again);
        let other = assemble_segmentation_set::<f32>(
            &windows,
            &TrainConfig {
                seed: 1,
                ..tiny_cfg()
            },
        )
        .unwrap();
        assert_ne!(set, other);
    }

    #[test]
    fn validation_carve_is_block_stratified_and_deterministic() {
        let mut windows = Vec::new();
        for block in ["a", "b", "c"] {
            for i in 0..10 {
                windows.push(mk_window(block, 20.0 + 50.0 * i as f64, 20.0, 8, i == 0));
            }
        }
        let (train, val) = carve_validation(windows.clone(), 0.1, 7).unwrap();
        assert_eq!(val.len(), 3);
        assert_eq!(train.len(), 27);
        for block in ["a", "b", "c"] {
            assert_eq!(val.iter().filter(|w| w.source_block_id == block).count(), 1);
        }
        let (train2, val2) = carve_validation(windows.clone(), 0.1, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(val, val2);

        // Tiny sets still yield one validation window.
        let small: Vec<Window> = windows.into_iter().take(4).collect();
        let (tr, va) = carve_validation(small, 0.1, 7).unwrap();
        assert_eq!(va.len(), 1);
        assert_eq!(tr.len(), 3);
    }

    /// Hand-built separable features: class 1 has a tall spike, class 0 is
    /// flat clutter. No window machinery, just feature matrices.
    fn separable_cls_set(n_samples: usize, n_points: usize, seed: u64) -> Vec<ClsSample<f32>> {
        let mut r = rng::stream(seed, &[rng::tag("toy-cls")]);
        (0..n_samples)
            .map(|i| {
                let label = i % 2;
                let mut data = Array2::<f32>::zeros((n_points, FEATURE_DIM));
                for p in 0..n_points {
                    data[[p, 0]] = r.random_range(-0.5..0.5);
                    data[[p, 1]] = r.random_range(-0.5..0.5);
                    data[[p, 2]] = if label == 1 && p % 3 == 0 {
                        r.random_range(0.7..1.0)
                    } else {
                        r.random_range(-0.1..0.1)
                    };
                    data[[p, 3]] = r.random_range(0.0..1.0);
                    data[[p, 4]] = r.random_range(0.0..1.0);
                    data[[p, 5]] = r.random_range(0.0..1.0);
                    data[[p, 6]] = r.random_range(-1.0..1.0);
                }
                ClsSample {
                    features: FeatureMatrix {
                        data,
                        centroid: [0.0; 3],
                        scale: 1.0,
                    },
                    label,
                }
            })
            .collect()
    }

    fn classifier_accuracy(model: &mut PointNetClassifier<f32>, set: &[ClsSample<f32>]) -> f64 {
        let mut correct = 0usize;
        for s in set {
            let x = stack_features(&[&s.features]).unwrap();
            let (logits, _) = model.forward(&x, Mode::Eval, None).unwrap();
            let pred = if logits[[0, 1]] > logits[[0, 0]] { 1 } else { 0 };
            if pred == s.label {
                correct += 1;
            }
        }
        correct as f64 / set.len() as f64
    }

    #[test]
    fn separable_toy_task_is_learned_within_ten_epochs() {
        let train = separable_cls_set(40, 32, 3);
        let val = separable_cls_set(10, 32, 4);
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 8,
            n_points: 32,
            initial_lr: 0.005,
            seed: 5,
            ..TrainConfig::default()
        };
        let arch = ArchitectureSpec {
            dropout: 0.0,
            ..tiny_arch()
        };
        let (mut model, history) = train_classifier_with_arch(&arch, &train, &val, &cfg).unwrap();
        assert!(history.epochs.len() <= 10);
        let acc = classifier_accuracy(&mut model, &train);
        assert!(acc >= 0.99, "train accuracy {acc} after {} epochs", history.epochs.len());

        // The restored model reproduces the best recorded validation loss.
        let weights = class_balanced_weights(&classification_counts(&train), cfg.beta).unwrap();
        let val_loss = classifier_val_loss(&mut model, &val, &weights, cfg.batch_size).unwrap();
        let best = history.best_val_loss().unwrap();
        assert!(
            (val_loss - best).abs() < 1e-9,
            "restored val loss {val_loss} vs best {best}"
        );
        for e in &history.epochs {
            assert!(best <= e.val_loss + 1e-12);
        }
    }

    #[test]
    fn training_history_is_deterministic() {
        let train = separable_cls_set(16, 24, 3);
        let val = separable_cls_set(6, 24, 4);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            n_points: 24,
            seed: 5,
            ..TrainConfig::default()
        };
        let (_, h1) = train_classifier_with_arch(&tiny_arch(), &train, &val, &cfg).unwrap();
        let (_, h2) = train_classifier_with_arch(&tiny_arch(), &train, &val, &cfg).unwrap();
        let strip = |h: &TrainHistory| -> Vec<(usize, f64, f64, f64)> {
            h.epochs
                .iter()
                .map(|e| (e.epoch, e.train_loss, e.val_loss, e.lr))
                .collect()
        };
        assert_eq!(strip(&h1), strip(&h2));
    }

    #[test]
    fn worsening_validation_stops_after_patience_epochs() {
        // Train: one shared feature pattern, mostly labeled 1; val: the same
        // pattern labeled 0. As the model commits to class 1, the validation
        // loss strictly worsens, so the best epoch is the first and training
        // stops after exactly `patience` further epochs.
        let mut r = rng::stream(11, &[rng::tag("toy-plateau")]);
        let shared = Array2::<f32>::from_shape_fn((16, FEATURE_DIM), |_| r.random_range(-0.5..0.5));
        let sample = |label: usize| ClsSample::<f32> {
            features: FeatureMatrix {
                data: shared.clone(),
                centroid: [0.0; 3],
                scale: 1.0,
            },
            label,
        };
        let train: Vec<_> = (0..8).map(|i| sample(usize::from(i != 0))).collect();
        let val = vec![sample(0)];
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 8,
            n_points: 16,
            initial_lr: 0.01,
            early_stop_patience: 3,
            seed: 2,
            ..TrainConfig::default()
        };
        let (_, history) = train_classifier_with_arch(&tiny_arch(), &train, &val, &cfg).unwrap();
        assert!(
            history.epochs.len() < cfg.epochs,
            "ran all {} epochs",
            history.epochs.len()
        );
        let best = history.best_val_loss().unwrap();
        let best_epoch = history
            .epochs
            .iter()
            .position(|e| e.val_loss == best)
            .unwrap();
        assert_eq!(history.epochs.len(), best_epoch + 1 + 3);
    }

    #[test]
    fn uniform_beta_reproduces_the_unweighted_objective() {
        // With beta = 0 every class weight is 1, so the recorded training
        // loss must equal plain mean NLL plus the penalty term, replayed
        // here with the same streams.
        let train = separable_cls_set(12, 16, 8);
        let val = separable_cls_set(4, 16, 9);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 64, // single batch
            n_points: 16,
            beta: 0.0,
            seed: 21,
            ..TrainConfig::default()
        };
        let arch = tiny_arch();
        let (_, history) = train_classifier_with_arch(&arch, &train, &val, &cfg).unwrap();

        let mut model = PointNetClassifier::<f32>::with_seed(&arch, cfg.seed).unwrap();
        let order = epoch_order(train.len(), cfg.seed, 1);
        let mut dropout = dropout_stream(cfg.seed, 1);
        let feats: Vec<&FeatureMatrix<f32>> = order.iter().map(|&i| &train[i].features).collect();
        let targets: Vec<usize> = order.iter().map(|&i| train[i].label).collect();
        let x = stack_features(&feats).unwrap();
        let (logits, cache) = model.forward(&x, Mode::Train, Some(&mut dropout)).unwrap();
        let lp = log_softmax(&logits);
        let mean_nll: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -f64::from(lp[[i, t]]))
            .sum::<f64>()
            / targets.len() as f64;
        let (penalty, _) = orthogonality_penalty(cache.feature_transforms());
        let expected = mean_nll + ORTH_PENALTY_COEFF * penalty;
        assert!(
            (history.epochs[0].train_loss - expected).abs() < 1e-9,
            "{} vs {}",
            history.epochs[0].train_loss,
            expected
        );
    }

    #[test]
    fn divergent_loss_aborts_with_a_train_error() {
        let train = separable_cls_set(8, 16, 8);
        let val = separable_cls_set(4, 16, 9);
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 8,
            n_points: 16,
            initial_lr: 1e12,
            seed: 21,
            ..TrainConfig::default()
        };
        let err = train_classifier_with_arch(&tiny_arch(), &train, &val, &cfg).unwrap_err();
        assert!(matches!(err, Error::Train(_)), "{err}");
    }

    #[test]
    fn non_finite_features_are_rejected_at_batch_assembly() {
        let mut train = separable_cls_set(8, 16, 8);
        train[0].features.data[[0, 0]] = f32::NAN;
        let val = separable_cls_set(4, 16, 9);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            n_points: 16,
            seed: 21,
            ..TrainConfig::default()
        };
        let err = train_classifier_with_arch(&tiny_arch(), &train, &val, &cfg).unwrap_err();
        assert!(matches!(err, Error::InvalidData(_)), "{err}");
    }

    /// Pointwise separable segmentation toy: label 1 iff z > 0.25.
    fn separable_seg_set(n_samples: usize, n_points: usize, seed: u64) -> Vec<SegSample<f32>> {
        let mut r = rng::stream(seed, &[rng::tag("toy-seg")]);
        (0..n_samples)
            .map(|_| {
                let mut data = Array2::<f32>::zeros((n_points, FEATURE_DIM));
                let mut labels = Vec::with_capacity(n_points);
                for p in 0..n_points {
                    let z = if p % 3 == 0 {
                        r.random_range(0.5..1.0)
                    } else {
                        r.random_range(-1.0..0.0)
                    };
                    data[[p, 0]] = r.random_range(-0.5..0.5);
                    data[[p, 1]] = r.random_range(-0.5..0.5);
                    data[[p, 2]] = z;
                    data[[p, 3]] = r.random_range(0.0..1.0);
                    labels.push(usize::from(z > 0.25));
                }
                SegSample {
                    features: FeatureMatrix {
                        data,
                        centroid: [0.0; 3],
                        scale: 1.0,
                    },
                    labels,
                }
            })
            .collect()
    }

    #[test]
    fn segmenter_learns_a_pointwise_threshold() {
        let train = separable_seg_set(12, 32, 3);
        let val = separable_seg_set(4, 32, 4);
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 4,
            n_points: 32,
            initial_lr: 0.01,
            seed: 6,
            ..TrainConfig::default()
        };
        let (mut model, history) = train_segmenter_with_arch(&tiny_arch(), &train, &val, &cfg).unwrap();
        assert!(history.epochs.len() <= 15);

        let mut correct = 0usize;
        let mut total = 0usize;
        for s in &train {
            let x = stack_features(&[&s.features]).unwrap();
            let (logits, _) = model.forward(&x, Mode::Eval).unwrap();
            for (p, &want) in s.labels.iter().enumerate() {
                let got = usize::from(logits[[0, p, 1]] > logits[[0, p, 0]]);
                correct += usize::from(got == want);
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.95, "point accuracy {acc}");

        let weights = class_balanced_weights(&segmentation_counts(&train), cfg.beta).unwrap();
        let val_loss = segmenter_val_loss(&mut model, &val, &weights, cfg.batch_size).unwrap();
        let best = history.best_val_loss().unwrap();
        assert!((val_loss - best).abs() < 1e-9);
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let history = TrainHistory {
            epochs: vec![
                EpochStats {
                    epoch: 1,
                    train_loss: 0.5,
                    val_loss: 0.6,
                    lr: 0.001,
                    seconds: 1.25,
                },
                EpochStats {
                    epoch: 2,
                    train_loss: 0.4,
                    val_loss: 0.55,
                    lr: 0.001,
                    seconds: 1.5,
                },
            ],
        };
        let csv = history.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "epoch,train_loss,val_loss,lr,seconds");
        assert!(lines[1].starts_with("1,0.5,0.6,0.001,"));
    }
}
