//! End-to-end scene labeling: tile, preprocess, classify each window, run
//! the segmenter on positives only, and merge per-window labels back onto
//! the full scene by point identity.

use ndarray::{Array3, s};

use crate::cloud::{ClassLabel, GroundModel, HeightFrame, PointCloud, Window};
use crate::error::{Error, Result};
use crate::models::{PointNetClassifier, PointNetSegmenter};
use crate::nn::Mode;
use crate::nn::ops::log_softmax;
use crate::preprocess::{self, FEATURE_DIM, FeatureMatrix, GridCell};
use crate::sampling::{SamplerConfig, SamplerMode, constrained_sample};
use crate::scalar::Scalar;

/// Scene-level inference parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub window_side: f64,
    pub stride: f64,
    /// Windows at or above this tower probability are segmented.
    pub cls_threshold: f64,
    /// Points sampled per window for the classifier input.
    pub n_points_cls: usize,
    /// Height-above-ground cutoff; higher points are labeled background.
    pub max_height: f32,
    /// Seed of the classifier's sampling streams.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            window_side: 40.0,
            stride: 40.0,
            cls_threshold: 0.5,
            n_points_cls: 2048,
            max_height: preprocess::DEFAULT_MAX_HEIGHT,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_side.is_finite() && self.window_side > 0.0) {
            return Err(Error::Config(format!(
                "window side must be positive, got {}",
                self.window_side
            )));
        }
        if !(self.stride.is_finite() && self.stride > 0.0 && self.stride <= self.window_side) {
            return Err(Error::Config(format!(
                "stride must lie in (0, side]; got {}",
                self.stride
            )));
        }
        if !(0.0..=1.0).contains(&self.cls_threshold) {
            return Err(Error::Config(format!(
                "classification threshold must lie in [0, 1], got {}",
                self.cls_threshold
            )));
        }
        if self.n_points_cls == 0 {
            return Err(Error::Config("n_points_cls must be positive".into()));
        }
        if !(self.max_height.is_finite() && self.max_height > 0.0) {
            return Err(Error::Config(format!(
                "max_height must be positive, got {}",
                self.max_height
            )));
        }
        Ok(())
    }
}

/// What the classifier decided for one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    /// Tower probability reached the threshold; the segmenter ran.
    Segment,
    /// Window skipped; all its points default to background.
    Skip,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Decision::Segment => "segment",
            Decision::Skip => "skip",
        })
    }
}

/// One row of the per-window decision log.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDecision {
    pub window_id: String,
    pub center_x: f64,
    pub center_y: f64,
    pub tower_probability: f64,
    pub decision: Decision,
}

/// Render decisions as CSV: `window_id,center_x,center_y,tower_probability,decision`.
pub fn decisions_to_csv(decisions: &[WindowDecision]) -> String {
    let mut out = String::from("window_id,center_x,center_y,tower_probability,decision\n");
    for d in decisions {
        out.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            d.window_id, d.center_x, d.center_y, d.tower_probability, d.decision
        ));
    }
    out
}

/// Parse a decision log written by [`decisions_to_csv`].
pub fn decisions_from_csv(text: &str) -> Result<Vec<WindowDecision>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidData("decision log is empty".into()))?;
    if header != "window_id,center_x,center_y,tower_probability,decision" {
        return Err(Error::InvalidData(format!(
            "unexpected decision log header: {header:?}"
        )));
    }
    let mut decisions = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::InvalidData(format!(
                "decision log row {}: expected 5 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let parse_num = |label: &str, s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                Error::InvalidData(format!(
                    "decision log row {}: bad {label} {s:?}",
                    i + 2
                ))
            })
        };
        let decision = match fields[4] {
            "segment" => Decision::Segment,
            "skip" => Decision::Skip,
            other => {
                return Err(Error::InvalidData(format!(
                    "decision log row {}: unknown decision {other:?}",
                    i + 2
                )));
            }
        };
        decisions.push(WindowDecision {
            window_id: fields[0].to_string(),
            center_x: parse_num("center_x", fields[1])?,
            center_y: parse_num("center_y", fields[2])?,
            tower_probability: parse_num("tower_probability", fields[3])?,
            decision,
        });
    }
    Ok(decisions)
}

/// A labeled scene plus the decision log that produced it.
#[derive(Debug, Clone)]
pub struct SceneInference {
    /// The input cloud with every point relabeled by the pipeline.
    pub labeled: PointCloud,
    pub decisions: Vec<WindowDecision>,
}

/// Per-window labels addressed by point index into a base cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowLabels {
    pub indices: Vec<usize>,
    pub labels: Vec<ClassLabel>,
}

fn label_priority(label: ClassLabel) -> u8 {
    match label {
        ClassLabel::Tower => 3,
        ClassLabel::PowerLine => 2,
        ClassLabel::Ground => 1,
        ClassLabel::Background => 0,
    }
}

/// Merge per-window labelings of `n` points into one label per point.
///
/// Overlapping windows are resolved by a fixed priority with `Tower` on
/// top, so a tower label from any window survives; the rule is
/// order-independent and idempotent under duplicated decisions. A point
/// covered by no window is an error.
pub fn merge_window_labels(n: usize, windows: &[WindowLabels]) -> Result<Vec<ClassLabel>> {
    let mut merged: Vec<Option<ClassLabel>> = vec![None; n];
    for (w, wl) in windows.iter().enumerate() {
        if wl.indices.len() != wl.labels.len() {
            return Err(Error::InvalidData(format!(
                "window {w}: {} indices but {} labels",
                wl.indices.len(),
                wl.labels.len()
            )));
        }
        for (&idx, &label) in wl.indices.iter().zip(&wl.labels) {
            if idx >= n {
                return Err(Error::InvalidData(format!(
                    "window {w} labels point {idx}, beyond the {n}-point cloud"
                )));
            }
            merged[idx] = Some(match merged[idx] {
                Some(old) if label_priority(old) >= label_priority(label) => old,
                _ => label,
            });
        }
    }
    merged
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::InvalidData(format!("point {i} is covered by no window"))))
        .collect()
}

/// A scene split into out-of-band points (already labeled by height rules)
/// and the active interior, tiled into windows.
pub(crate) struct ScenePartition {
    /// Provisional label per original point; active points start as
    /// background.
    pub labels: Vec<ClassLabel>,
    /// Original index of each active point.
    pub active_idx: Vec<usize>,
    /// Height-above-ground cloud of the active points.
    pub active: PointCloud,
    pub cells: Vec<GridCell>,
}

/// Apply the height rules and tile what remains: points at ground level are
/// labeled ground, points above `max_height` background; everything else is
/// windowed for the models.
pub(crate) fn partition_scene(
    cloud: &PointCloud,
    ground: &GroundModel,
    cfg: &PipelineConfig,
) -> Result<ScenePartition> {
    cfg.validate()?;
    let hag = preprocess::compute_hag(cloud, ground)?;
    let mut labels = vec![ClassLabel::Background; hag.points.len()];
    let mut active_idx = Vec::new();
    let mut active_points = Vec::new();
    for (i, p) in hag.points.iter().enumerate() {
        if p.z == 0.0 {
            labels[i] = ClassLabel::Ground;
        } else if p.z > cfg.max_height {
            labels[i] = ClassLabel::Background;
        } else {
            active_idx.push(i);
            active_points.push(*p);
        }
    }
    let active = PointCloud::new(active_points, HeightFrame::Hag);
    let cells = preprocess::tile_assignments(&active, cfg.window_side, cfg.stride)?;
    Ok(ScenePartition {
        labels,
        active_idx,
        active,
        cells,
    })
}

pub(crate) fn cell_window_id(cell: &GridCell) -> String {
    format!("{}_{}", cell.ix, cell.iy)
}

fn features_to_batch<S: Scalar>(features: &FeatureMatrix<S>) -> Array3<S> {
    let n = features.n();
    let mut x = Array3::<S>::zeros((1, n, FEATURE_DIM));
    x.slice_mut(s![0, .., ..]).assign(&features.data);
    x
}

/// Run the classify-then-segment pipeline over one scene.
///
/// Every input point receives exactly one label. Ground-level points are
/// labeled `Ground` and points above the height cutoff `Background` without
/// consulting the models; each remaining window is classified on a
/// constrained sample of `n_points_cls` points, and only windows at or
/// above the threshold are segmented — using all of their points in a
/// single batch. Windows below the threshold contribute only background.
pub fn infer_scene<S: Scalar>(
    cloud: &PointCloud,
    ground: &GroundModel,
    cls: &mut PointNetClassifier<S>,
    seg: &mut PointNetSegmenter<S>,
    cfg: &PipelineConfig,
) -> Result<SceneInference> {
    cfg.validate()?;
    if cloud.height_frame != HeightFrame::Has {
        return Err(Error::InvalidData(
            "infer_scene expects a height-above-sea cloud and a ground model".into(),
        ));
    }
    for (what, k) in [("classifier", cls.arch.k), ("segmenter", seg.arch.k)] {
        if k != 2 {
            return Err(Error::Checkpoint(format!(
                "{what} must be binary (k = 2), found k = {k}"
            )));
        }
    }

    let partition = partition_scene(cloud, ground, cfg)?;
    let sampler = SamplerConfig {
        n_target: cfg.n_points_cls,
        mode: SamplerMode::Constrained,
        seed: cfg.seed,
        ..SamplerConfig::default()
    };

    let mut decisions = Vec::with_capacity(partition.cells.len());
    let mut window_labels = Vec::with_capacity(partition.cells.len());
    for cell in &partition.cells {
        let points: Vec<_> = cell.indices.iter().map(|&i| partition.active.points[i]).collect();
        let window = Window::new(cell.center_x, cell.center_y, cfg.window_side, points, "scene")?;

        let sampled = constrained_sample(&window, &sampler)?;
        let mut cls_features = preprocess::normalize_unit_sphere::<S>(&sampled)?;
        if !cls.arch.color {
            cls_features.zero_color_channels();
        }
        let x = features_to_batch(&cls_features);
        let (logits, _) = cls.forward(&x, Mode::Eval, None)?;
        let lp = log_softmax(&logits);
        let tower_probability = lp[[0, 1]].wide().exp();

        let decision = if tower_probability >= cfg.cls_threshold {
            Decision::Segment
        } else {
            Decision::Skip
        };
        let labels = match decision {
            Decision::Skip => vec![ClassLabel::Background; window.len()],
            Decision::Segment => {
                let mut seg_features = preprocess::normalize_unit_sphere::<S>(&window)?;
                if !seg.arch.color {
                    seg_features.zero_color_channels();
                }
                let x = features_to_batch(&seg_features);
                let (logits, _) = seg.forward(&x, Mode::Eval)?;
                (0..window.len())
                    .map(|p| {
                        if logits[[0, p, 1]] > logits[[0, p, 0]] {
                            ClassLabel::Tower
                        } else {
                            ClassLabel::Background
                        }
                    })
                    .collect()
            }
        };
        window_labels.push(WindowLabels {
            indices: cell.indices.clone(),
            labels,
        });
        decisions.push(WindowDecision {
            window_id: cell_window_id(cell),
            center_x: cell.center_x,
            center_y: cell.center_y,
            tower_probability,
            decision,
        });
    }

    let merged = merge_window_labels(partition.active.points.len(), &window_labels)?;
    let mut labels = partition.labels;
    for (&orig, label) in partition.active_idx.iter().zip(merged) {
        labels[orig] = label;
    }

    let mut points = cloud.points.clone();
    for (p, label) in points.iter_mut().zip(&labels) {
        p.label = *label;
    }
    let labeled = PointCloud::new(points, HeightFrame::Has);
    Ok(SceneInference { labeled, decisions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointRecord;
    use crate::models::ArchitectureSpec;

    fn pt(x: f32, y: f32, z: f32) -> PointRecord {
        PointRecord {
            x,
            y,
            z,
            intensity: 0.5,
            red: 0.25,
            green: 0.4,
            blue: 0.3,
            nir: 0.75,
            label: ClassLabel::Background,
        }
    }

    fn flat_ground(extent: f64) -> GroundModel {
        let cells = (extent / 10.0).ceil() as usize + 1;
        GroundModel::new(0.0, 0.0, 10.0, cells, cells, vec![100.0; cells * cells]).unwrap()
    }

    fn tiny_arch() -> ArchitectureSpec {
        ArchitectureSpec {
            widths: [8, 8, 8, 16, 32],
            head: [16, 8],
            ..ArchitectureSpec::light(2)
        }
    }

    fn tiny_models() -> (PointNetClassifier<f32>, PointNetSegmenter<f32>) {
        (
            PointNetClassifier::with_seed(&tiny_arch(), 1).unwrap(),
            PointNetSegmenter::with_seed(&tiny_arch(), 2).unwrap(),
        )
    }

    /// 80×40 m scene on flat ground at 100 m: two windows of mid-height
    /// clutter, one ground-level point, one point above the cutoff.
    fn test_scene() -> (PointCloud, GroundModel) {
        let mut points = Vec::new();
        for i in 0..60 {
            let x = 1.0 + (i % 10) as f32 * 7.5;
            let y = 2.0 + (i / 10) as f32 * 6.0;
            let z = 101.0 + (i % 13) as f32;
            points.push(pt(x, y, z));
        }
        points.push(pt(5.0, 5.0, 100.0)); // ground level
        points.push(pt(60.0, 20.0, 230.0)); // above cutoff
        (PointCloud::new(points, HeightFrame::Has), flat_ground(80.0))
    }

    #[test]
    fn every_point_is_labeled_exactly_once() {
        let (cloud, ground) = test_scene();
        let (mut cls, mut seg) = tiny_models();
        let cfg = PipelineConfig::default();
        let out = infer_scene(&cloud, &ground, &mut cls, &mut seg, &cfg).unwrap();
        assert_eq!(out.labeled.points.len(), cloud.points.len());
        // Height rules applied to the out-of-band points.
        assert_eq!(out.labeled.points[60].label, ClassLabel::Ground);
        assert_eq!(out.labeled.points[61].label, ClassLabel::Background);
        // Coordinates pass through untouched.
        for (a, b) in cloud.points.iter().zip(&out.labeled.points) {
            assert_eq!((a.x, a.y, a.z), (b.x, b.y, b.z));
        }
    }

    #[test]
    fn skipped_windows_contribute_no_tower_labels() {
        let (cloud, ground) = test_scene();
        let (mut cls, mut seg) = tiny_models();
        let cfg = PipelineConfig {
            cls_threshold: 1.0, // unreachable: probabilities are < 1
            ..PipelineConfig::default()
        };
        let out = infer_scene(&cloud, &ground, &mut cls, &mut seg, &cfg).unwrap();
        assert!(out.decisions.iter().all(|d| d.decision == Decision::Skip));
        assert!(
            out.labeled
                .points
                .iter()
                .all(|p| p.label != ClassLabel::Tower)
        );
    }

    #[test]
    fn forced_segmentation_still_conserves_every_point() {
        let (cloud, ground) = test_scene();
        let (mut cls, mut seg) = tiny_models();
        let cfg = PipelineConfig {
            cls_threshold: 0.0, // every window segments
            ..PipelineConfig::default()
        };
        let out = infer_scene(&cloud, &ground, &mut cls, &mut seg, &cfg).unwrap();
        assert!(
            out.decisions
                .iter()
                .all(|d| d.decision == Decision::Segment)
        );
        assert_eq!(out.labeled.points.len(), cloud.points.len());
        // Out-of-band points never reach the segmenter.
        assert_eq!(out.labeled.points[60].label, ClassLabel::Ground);
        assert_eq!(out.labeled.points[61].label, ClassLabel::Background);
    }

    #[test]
    fn inference_is_reproducible_byte_for_byte() {
        let (cloud, ground) = test_scene();
        let (mut cls, mut seg) = tiny_models();
        let cfg = PipelineConfig::default();
        let a = infer_scene(&cloud, &ground, &mut cls, &mut seg, &cfg).unwrap();
        let b = infer_scene(&cloud, &ground, &mut cls, &mut seg, &cfg).unwrap();
        assert_eq!(a.labeled.points, b.labeled.points);
        assert_eq!(decisions_to_csv(&a.decisions), decisions_to_csv(&b.decisions));
    }

    #[test]
    fn non_binary_models_are_rejected_before_any_window() {
        let (cloud, ground) = test_scene();
        let arch3 = ArchitectureSpec {
            k: 3,
            ..tiny_arch()
        };
        let mut cls = PointNetClassifier::<f32>::with_seed(&arch3, 1).unwrap();
        let (_, mut seg) = tiny_models();
        let err = infer_scene(&cloud, &ground, &mut cls, &mut seg, &PipelineConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn merge_keeps_tower_over_background_and_reports_gaps() {
        let labels = merge_window_labels(
            3,
            &[
                WindowLabels {
                    indices: vec![0, 1, 2],
                    labels: vec![
                        ClassLabel::Background,
                        ClassLabel::Tower,
                        ClassLabel::Background,
                    ],
                },
                WindowLabels {
                    indices: vec![1, 2],
                    labels: vec![ClassLabel::Background, ClassLabel::Tower],
                },
            ],
        )
        .unwrap();
        assert_eq!(
            labels,
            vec![ClassLabel::Background, ClassLabel::Tower, ClassLabel::Tower]
        );

        // Idempotent under a duplicated decision.
        let dup = merge_window_labels(
            3,
            &[
                WindowLabels {
                    indices: vec![0, 1, 2],
                    labels: labels.clone(),
                },
                WindowLabels {
                    indices: vec![0, 1, 2],
                    labels: labels.clone(),
                },
            ],
        )
        .unwrap();
        assert_eq!(dup, labels);

        // A point outside every window is an error naming the index.
        let err = merge_window_labels(
            3,
            &[WindowLabels {
                indices: vec![0, 2],
                labels: vec![ClassLabel::Background, ClassLabel::Background],
            }],
        )
        .unwrap_err();
        assert!(err.to_string().contains("point 1"), "{err}");
    }

    #[test]
    fn partition_of_a_disjoint_grid_is_a_concatenation() {
        // stride == side: each point in exactly one window; merging window
        // labelings reassembles the original order.
        let (cloud, ground) = test_scene();
        let cfg = PipelineConfig::default();
        let partition = partition_scene(&cloud, &ground, &cfg).unwrap();
        let n_active = partition.active.points.len();
        let covered: usize = partition.cells.iter().map(|c| c.indices.len()).sum();
        assert_eq!(covered, n_active);

        let windows: Vec<WindowLabels> = partition
            .cells
            .iter()
            .map(|c| WindowLabels {
                indices: c.indices.clone(),
                labels: vec![ClassLabel::Background; c.indices.len()],
            })
            .collect();
        let merged = merge_window_labels(n_active, &windows).unwrap();
        assert_eq!(merged.len(), n_active);
    }

    #[test]
    fn decision_csv_is_well_formed() {
        let rows = vec![WindowDecision {
            window_id: "0_0".into(),
            center_x: 20.0,
            center_y: 20.0,
            tower_probability: 0.75,
            decision: Decision::Segment,
        }];
        let csv = decisions_to_csv(&rows);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines[0], "window_id,center_x,center_y,tower_probability,decision");
        assert_eq!(lines[1], "0_0,20,20,0.750000,segment");
    }

    #[test]
    fn decision_csv_survives_a_write_read_cycle() {
        let rows = vec![
            WindowDecision {
                window_id: "0_0".into(),
                center_x: 20.0,
                center_y: 20.0,
                tower_probability: 0.75,
                decision: Decision::Segment,
            },
            WindowDecision {
                window_id: "3_1".into(),
                center_x: 140.0,
                center_y: 60.0,
                tower_probability: 0.015625,
                decision: Decision::Skip,
            },
        ];
        let parsed = decisions_from_csv(&decisions_to_csv(&rows)).unwrap();
        assert_eq!(parsed, rows);
    }

    #[test]
    fn corrupt_decision_logs_are_rejected() {
        assert!(decisions_from_csv("").is_err());
        assert!(decisions_from_csv("who,what\n").is_err());
        let header = "window_id,center_x,center_y,tower_probability,decision\n";
        assert!(decisions_from_csv(&format!("{header}0_0,1,2,0.5\n")).is_err());
        assert!(decisions_from_csv(&format!("{header}0_0,1,2,0.5,maybe\n")).is_err());
        assert!(decisions_from_csv(&format!("{header}0_0,1,x,0.5,skip\n")).is_err());
    }
}
