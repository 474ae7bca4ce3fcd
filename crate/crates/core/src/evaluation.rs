//! Scoring a labeled scene against ground truth: window-level detection F1
//! and point-level IoU, both binary (tower vs everything else) and over the
//! full label set.

use std::collections::BTreeMap;

use crate::cloud::{ClassLabel, GroundModel, PointCloud};
use crate::error::{Error, Result};
use crate::inference::{self, Decision, PipelineConfig, SceneInference, WindowDecision};
use crate::metrics::{Confusion, F1Outcome, MetricsReport, MultiConfusion};

/// Index of the non-tower class in the binary point confusion.
pub const BIN_OTHER: usize = 0;
/// Index of the tower class in the binary point confusion.
pub const BIN_TOWER: usize = 1;

/// Accumulated scores for one or more scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Window-level detection outcome: did the pipeline segment windows
    /// that truly contain a tower?
    pub windows: Confusion,
    /// Point-level binary confusion, tower vs other.
    pub points_binary: MultiConfusion,
    /// Point-level confusion over the full label set.
    pub points_full: MultiConfusion,
}

impl Evaluation {
    pub fn new() -> Evaluation {
        Evaluation {
            windows: Confusion::default(),
            points_binary: MultiConfusion::new(2),
            points_full: MultiConfusion::new(4),
        }
    }

    /// Fold another evaluation into this one; equivalent to scoring the
    /// concatenated scenes.
    pub fn merge(&mut self, other: &Evaluation) {
        self.windows.merge(&other.windows);
        self.points_binary
            .merge(&other.points_binary)
            .expect("evaluations always share class counts");
        self.points_full
            .merge(&other.points_full)
            .expect("evaluations always share class counts");
    }

    /// Window-level detection F1.
    pub fn window_f1(&self) -> F1Outcome {
        self.windows.f1()
    }

    pub fn tower_iou(&self) -> Option<f64> {
        self.points_binary.iou_per_class()[BIN_TOWER]
    }

    pub fn other_iou(&self) -> Option<f64> {
        self.points_binary.iou_per_class()[BIN_OTHER]
    }

    /// Mean IoU over the binary tower/other split.
    pub fn miou(&self) -> f64 {
        self.points_binary.miou()
    }

    /// Headline numbers as CSV: `metric,value` rows.
    pub fn summary_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("window_f1,{:.6}\n", self.window_f1().value));
        out.push_str(&format!("iou_tower,{}\n", fmt(self.tower_iou())));
        out.push_str(&format!("iou_other,{}\n", fmt(self.other_iou())));
        out.push_str(&format!("miou,{:.6}\n", self.miou()));
        out
    }

    /// Full per-class report over the four scene labels.
    pub fn full_report(&self) -> MetricsReport {
        MetricsReport::for_point_classes(self.points_full.clone(), self.window_f1())
    }
}

/// Score one scene's inference against its ground-truth labels.
///
/// The truth cloud must be the same scene the pipeline labeled: same points
/// in the same order. Window truth is derived by partitioning the truth
/// cloud exactly as inference did, so every logged decision matches one
/// truth window.
pub fn evaluate_scene(
    truth: &PointCloud,
    ground: &GroundModel,
    inference_out: &SceneInference,
    cfg: &PipelineConfig,
) -> Result<Evaluation> {
    let predicted = &inference_out.labeled;
    if truth.points.len() != predicted.points.len() {
        return Err(Error::InvalidData(format!(
            "truth has {} points but the prediction has {}",
            truth.points.len(),
            predicted.points.len()
        )));
    }
    if truth
        .points
        .iter()
        .zip(&predicted.points)
        .any(|(t, p)| (t.x, t.y, t.z) != (p.x, p.y, p.z))
    {
        return Err(Error::InvalidData(
            "prediction does not correspond to this scene: point coordinates differ".into(),
        ));
    }

    let mut eval = Evaluation::new();

    // Point-level confusions over every input point.
    for (t, p) in truth.points.iter().zip(&predicted.points) {
        let truth_tower = usize::from(t.label == ClassLabel::Tower);
        let pred_tower = usize::from(p.label == ClassLabel::Tower);
        eval.points_binary.observe(pred_tower, truth_tower)?;
        eval.points_full
            .observe(p.label.to_u8() as usize, t.label.to_u8() as usize)?;
    }

    // Window truth from the same partition the pipeline used.
    let partition = inference::partition_scene(truth, ground, cfg)?;
    let mut truth_windows: BTreeMap<String, bool> = BTreeMap::new();
    for cell in &partition.cells {
        let has_tower = cell
            .indices
            .iter()
            .any(|&i| partition.active.points[i].label == ClassLabel::Tower);
        truth_windows.insert(inference::cell_window_id(cell), has_tower);
    }
    if truth_windows.len() != inference_out.decisions.len() {
        return Err(Error::InvalidData(format!(
            "decision log covers {} windows but the scene partitions into {}",
            inference_out.decisions.len(),
            truth_windows.len()
        )));
    }
    for decision in &inference_out.decisions {
        let Some(&has_tower) = truth_windows.get(&decision.window_id) else {
            return Err(Error::InvalidData(format!(
                "decision log names window {:?}, which the scene partition lacks",
                decision.window_id
            )));
        };
        eval.windows
            .observe(decision.decision == Decision::Segment, has_tower);
    }
    Ok(eval)
}

/// Reconstruct a decision log from an already-labeled cloud.
///
/// A window counts as segmented when any of its points carries a `Tower`
/// label; the recorded probability collapses to 1 or 0 accordingly. This
/// recovers enough of the log to score window detection when only the
/// labeled tiles were kept.
pub fn derive_decisions(
    labeled: &PointCloud,
    ground: &GroundModel,
    cfg: &PipelineConfig,
) -> Result<Vec<WindowDecision>> {
    let partition = inference::partition_scene(labeled, ground, cfg)?;
    let mut decisions = Vec::with_capacity(partition.cells.len());
    for cell in &partition.cells {
        let has_tower = cell
            .indices
            .iter()
            .any(|&i| partition.active.points[i].label == ClassLabel::Tower);
        decisions.push(WindowDecision {
            window_id: inference::cell_window_id(cell),
            center_x: cell.center_x,
            center_y: cell.center_y,
            tower_probability: if has_tower { 1.0 } else { 0.0 },
            decision: if has_tower {
                Decision::Segment
            } else {
                Decision::Skip
            },
        });
    }
    Ok(decisions)
}
