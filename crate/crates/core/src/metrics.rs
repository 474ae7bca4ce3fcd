//! Evaluation metrics: confusion counts, F1 for window classification,
//! per-class IoU and mIoU for point segmentation.

use crate::cloud::ClassLabel;
use crate::error::{Error, Result};

/// Binary confusion counts. Mergeable by count-wise addition, so partial
/// evaluations can be combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl Confusion {
    pub fn observe(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.true_pos += 1,
            (true, false) => self.false_pos += 1,
            (false, true) => self.false_neg += 1,
            (false, false) => self.true_neg += 1,
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    /// Intersection over union; `None` when the class is absent from both
    /// prediction and truth (TP + FP + FN = 0).
    pub fn iou(&self) -> Option<f64> {
        let denom = self.true_pos + self.false_pos + self.false_neg;
        if denom == 0 {
            None
        } else {
            Some(self.true_pos as f64 / denom as f64)
        }
    }

    pub fn f1(&self) -> F1Outcome {
        let denom = 2 * self.true_pos + self.false_pos + self.false_neg;
        if denom == 0 {
            F1Outcome {
                value: 0.0,
                degenerate: true,
            }
        } else {
            F1Outcome {
                value: 2.0 * self.true_pos as f64 / denom as f64,
                degenerate: false,
            }
        }
    }
}

/// F1 together with the degenerate marker: when no positives exist on
/// either side the score is defined as 0 rather than NaN, and the flag
/// says so.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Outcome {
    pub value: f64,
    pub degenerate: bool,
}

/// Binary F1 over paired label sequences.
pub fn f1_score(pred: &[bool], truth: &[bool]) -> Result<F1Outcome> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidData(format!(
            "f1 needs matched labelings, got {} predictions for {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidData("f1 over an empty labeling".into()));
    }
    let mut c = Confusion::default();
    for (&p, &t) in pred.iter().zip(truth) {
        c.observe(p, t);
    }
    Ok(c.f1())
}

/// Per-class confusion counts for a `k`-way labeling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiConfusion {
    classes: Vec<Confusion>,
}

impl MultiConfusion {
    pub fn new(k: usize) -> MultiConfusion {
        MultiConfusion {
            classes: vec![Confusion::default(); k],
        }
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, c: usize) -> &Confusion {
        &self.classes[c]
    }

    pub fn observe(&mut self, pred: usize, truth: usize) -> Result<()> {
        let k = self.k();
        if pred >= k || truth >= k {
            return Err(Error::InvalidData(format!(
                "label out of range: pred {pred}, truth {truth}, k {k}"
            )));
        }
        for (c, conf) in self.classes.iter_mut().enumerate() {
            conf.observe(pred == c, truth == c);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MultiConfusion) -> Result<()> {
        if self.k() != other.k() {
            return Err(Error::InvalidData(format!(
                "cannot merge confusions over {} and {} classes",
                self.k(),
                other.k()
            )));
        }
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.merge(b);
        }
        Ok(())
    }

    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        self.classes.iter().map(Confusion::iou).collect()
    }

    /// Unweighted mean IoU over classes present on at least one side.
    /// 0 when no class is present at all (empty evaluation).
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.classes.iter().filter_map(Confusion::iou).collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// Build per-class confusions from paired label sequences.
pub fn multi_confusion(pred: &[usize], truth: &[usize], k: usize) -> Result<MultiConfusion> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidData(format!(
            "iou needs matched labelings, got {} predictions for {} truths",
            pred.len(),
            truth.len()
        )));
    }
    let mut mc = MultiConfusion::new(k);
    for (&p, &t) in pred.iter().zip(truth) {
        mc.observe(p, t)?;
    }
    Ok(mc)
}

/// Confusions over the standard four point classes.
pub fn class_confusion(pred: &[ClassLabel], truth: &[ClassLabel]) -> Result<MultiConfusion> {
    let pred: Vec<usize> = pred.iter().map(|c| c.to_u8() as usize).collect();
    let truth: Vec<usize> = truth.iter().map(|c| c.to_u8() as usize).collect();
    multi_confusion(&pred, &truth, ClassLabel::ALL.len())
}

/// Complete evaluation result: window-classification F1 plus point-level
/// confusions, renderable as CSV or a table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub confusion: MultiConfusion,
    pub f1: F1Outcome,
}

impl MetricsReport {
    pub fn for_point_classes(confusion: MultiConfusion, f1: F1Outcome) -> MetricsReport {
        MetricsReport {
            class_names: ClassLabel::ALL.iter().map(|c| c.to_string()).collect(),
            confusion,
            f1,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,tp,fp,fn,tn,iou\n");
        for (name, conf) in self.class_names.iter().zip(0..self.confusion.k()) {
            let c = self.confusion.class(conf);
            let iou = match c.iou() {
                Some(v) => format!("{v:.6}"),
                None => String::new(),
            };
            out.push_str(&format!(
                "{name},{},{},{},{},{iou}\n",
                c.true_pos, c.false_pos, c.false_neg, c.true_neg
            ));
        }
        out.push_str(&format!("f1,{:.6}\n", self.f1.value));
        out.push_str(&format!("miou,{:.6}\n", self.confusion.miou()));
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>10} {:>10} {:>10} {:>10} {:>8}\n",
            "class", "tp", "fp", "fn", "tn", "iou"
        ));
        for (name, idx) in self.class_names.iter().zip(0..self.confusion.k()) {
            let c = self.confusion.class(idx);
            let iou = match c.iou() {
                Some(v) => format!("{v:.4}"),
                None => "-".into(),
            };
            out.push_str(&format!(
                "{name:<12} {:>10} {:>10} {:>10} {:>10} {iou:>8}\n",
                c.true_pos, c.false_pos, c.false_neg, c.true_neg
            ));
        }
        let flag = if self.f1.degenerate {
            " (degenerate: no positives)"
        } else {
            ""
        };
        out.push_str(&format!("window F1: {:.4}{flag}\n", self.f1.value));
        out.push_str(&format!("mIoU:      {:.4}\n", self.confusion.miou()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    #[test]
    fn perfect_predictions_score_f1_one() {
        let truth = vec![true, false, true, true, false];
        let got = f1_score(&truth, &truth).unwrap();
        assert_eq!(got.value, 1.0);
        assert!(!got.degenerate);
    }

    #[test]
    fn f1_matches_a_hand_computed_example() {
        // 8 true positives, 2 false positives, 2 false negatives:
        // 2·8 / (2·8 + 2 + 2) = 16/20 = 0.8 exactly.
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..8 {
            pred.push(true);
            truth.push(true);
        }
        for _ in 0..2 {
            pred.push(true);
            truth.push(false);
        }
        for _ in 0..2 {
            pred.push(false);
            truth.push(true);
        }
        for _ in 0..5 {
            pred.push(false);
            truth.push(false);
        }
        assert_eq!(f1_score(&pred, &truth).unwrap().value, 0.8);
    }

    #[test]
    fn all_negative_f1_is_zero_and_flagged() {
        let pred = vec![false; 10];
        let truth = vec![false; 10];
        let got = f1_score(&pred, &truth).unwrap();
        assert_eq!(got.value, 0.0);
        assert!(got.degenerate);
    }

    #[test]
    fn f1_rejects_mismatched_or_empty_inputs() {
        assert!(f1_score(&[true], &[true, false]).is_err());
        assert!(f1_score(&[], &[]).is_err());
    }

    #[test]
    fn identical_labelings_have_unit_iou_everywhere() {
        let labels = vec![0usize, 1, 2, 1, 0, 3, 3, 2];
        let mc = multi_confusion(&labels, &labels, 4).unwrap();
        for iou in mc.iou_per_class() {
            assert_eq!(iou, Some(1.0));
        }
        assert_eq!(mc.miou(), 1.0);
    }

    #[test]
    fn disjoint_predictions_have_zero_iou() {
        // Predicted tower on the left half, true tower on the right half.
        let pred = vec![0usize, 0, 1, 1];
        let truth = vec![1usize, 1, 0, 0];
        let mc = multi_confusion(&pred, &truth, 2).unwrap();
        assert_eq!(mc.iou_per_class(), vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn partial_overlap_iou_matches_the_count_argument() {
        // Truth: 10 tower, 90 other. Prediction keeps 5 towers and marks 5
        // other points as tower: TP=5, FP=5, FN=5 → 5/15.
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for i in 0..10 {
            truth.push(0usize);
            pred.push(if i < 5 { 0 } else { 1 });
        }
        for i in 0..90 {
            truth.push(1usize);
            pred.push(if i < 5 { 0 } else { 1 });
        }
        let mc = multi_confusion(&pred, &truth, 2).unwrap();
        let tower = mc.iou_per_class()[0].unwrap();
        assert!((tower - 5.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_are_excluded_from_miou() {
        // Class 2 never appears on either side; class 0 and 1 do.
        let pred = vec![0usize, 1, 1, 0];
        let truth = vec![0usize, 1, 0, 0];
        let mc = multi_confusion(&pred, &truth, 3).unwrap();
        assert_eq!(mc.iou_per_class()[2], None);
        let included: Vec<f64> = mc.iou_per_class().into_iter().flatten().collect();
        assert_eq!(included.len(), 2);
        let expect = included.iter().sum::<f64>() / 2.0;
        assert_eq!(mc.miou(), expect);
    }

    #[test]
    fn merged_confusions_equal_the_concatenated_evaluation() {
        let pred_a = vec![0usize, 1, 0];
        let truth_a = vec![0usize, 0, 1];
        let pred_b = vec![1usize, 1];
        let truth_b = vec![1usize, 0];
        let mut merged = multi_confusion(&pred_a, &truth_a, 2).unwrap();
        merged
            .merge(&multi_confusion(&pred_b, &truth_b, 2).unwrap())
            .unwrap();

        let pred: Vec<usize> = pred_a.into_iter().chain(pred_b).collect();
        let truth: Vec<usize> = truth_a.into_iter().chain(truth_b).collect();
        assert_eq!(merged, multi_confusion(&pred, &truth, 2).unwrap());
    }

    #[test]
    fn joint_shuffles_leave_metrics_unchanged() {
        let mut rng = crate::rng::stream(5, &[crate::rng::tag("metric-shuffle")]);
        let pred: Vec<usize> = (0..200).map(|i| (i * 7 + 3) % 4).collect();
        let truth: Vec<usize> = (0..200).map(|i| (i * 5 + 1) % 4).collect();
        let base = multi_confusion(&pred, &truth, 4).unwrap();

        let mut order: Vec<usize> = (0..200).collect();
        order.shuffle(&mut rng);
        let pred_s: Vec<usize> = order.iter().map(|&i| pred[i]).collect();
        let truth_s: Vec<usize> = order.iter().map(|&i| truth[i]).collect();
        assert_eq!(base, multi_confusion(&pred_s, &truth_s, 4).unwrap());
    }

    #[test]
    fn report_csv_has_the_documented_shape() {
        let pred = [ClassLabel::Tower, ClassLabel::Ground, ClassLabel::Background];
        let truth = [ClassLabel::Tower, ClassLabel::Ground, ClassLabel::Ground];
        let mc = class_confusion(&pred, &truth).unwrap();
        let report = MetricsReport::for_point_classes(
            mc,
            F1Outcome {
                value: 1.0,
                degenerate: false,
            },
        );
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,tp,fp,fn,tn,iou");
        assert_eq!(lines.len(), 7, "4 class rows + f1 + miou");
        assert!(lines[1].starts_with("tower,1,0,0,2,1.000000"), "{}", lines[1]);
        // PowerLine is absent from both sides: empty IoU field.
        assert!(lines[2].ends_with(","), "{}", lines[2]);
        assert_eq!(lines[5], "f1,1.000000");
        assert!(lines[6].starts_with("miou,"));
        // The table renderer agrees on the headline numbers.
        let table = report.to_table();
        assert!(table.contains("window F1: 1.0000"));
    }

    proptest! {
        #[test]
        fn miou_lies_between_class_extremes(
            labels in proptest::collection::vec((0usize..3, 0usize..3), 1..120)
        ) {
            let pred: Vec<usize> = labels.iter().map(|(p, _)| *p).collect();
            let truth: Vec<usize> = labels.iter().map(|(_, t)| *t).collect();
            let mc = multi_confusion(&pred, &truth, 3).unwrap();
            let present: Vec<f64> = mc.iou_per_class().into_iter().flatten().collect();
            prop_assert!(!present.is_empty());
            let lo = present.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = present.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(mc.miou() >= lo - 1e-12 && mc.miou() <= hi + 1e-12);
        }

        #[test]
        fn self_comparison_is_always_perfect(
            labels in proptest::collection::vec(0usize..4, 1..100)
        ) {
            let mc = multi_confusion(&labels, &labels, 4).unwrap();
            prop_assert!(mc.iou_per_class().into_iter().flatten().all(|v| v == 1.0));
            prop_assert_eq!(mc.miou(), 1.0);
        }
    }
}
