//! Binary-classification evaluation: confusion counts, accuracy,
//! precision/recall/F1, ROC curve and AUC.
//!
//! The positive class is CGI (label 1) throughout, and scores are the
//! predicted probability of that class.

use crate::error::{Error, Result};

/// Counts at a fixed decision threshold. Positive class = CGI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// One point per grouped threshold, from (0,0) to (1,1).
#[derive(Debug, Clone)]
pub struct RocCurve {
    /// (false-positive rate, true-positive rate, threshold); FPR and TPR
    /// are non-decreasing along the list.
    pub points: Vec<(f64, f64, f64)>,
    /// Trapezoidal area under the curve.
    pub auc: f64,
}

/// Threshold scores at `threshold` (predict positive iff `score >= t`).
pub fn confusion(scores: &[f64], labels: &[usize], threshold: f64) -> Result<ConfusionMatrix> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "confusion needs matching non-empty scores/labels, got {}/{}",
            scores.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (&s, &y) in scores.iter().zip(labels) {
        let predicted_positive = s >= threshold;
        match (predicted_positive, y == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Precision, recall, F1 with the zero-denominator conventions:
/// precision := 0 when TP+FP = 0, recall := 0 when TP+FN = 0, F1 := 0 when
/// P+R = 0.
pub fn precision_recall_f1(cm: &ConfusionMatrix) -> (f64, f64, f64) {
    let precision = if cm.tp + cm.fp == 0 { 0.0 } else { cm.tp as f64 / (cm.tp + cm.fp) as f64 };
    let recall = if cm.tp + cm.fn_ == 0 { 0.0 } else { cm.tp as f64 / (cm.tp + cm.fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// (TP + TN) / total.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::Data("accuracy of an empty confusion matrix".into()));
    }
    Ok((cm.tp + cm.tn) as f64 / cm.total() as f64)
}

/// ROC by sweeping thresholds over the unique scores in descending order;
/// tied scores collapse into a single step. AUC by the trapezoidal rule,
/// which equals the tie-adjusted concordant-pair statistic.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<RocCurve> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Data("roc_auc needs matching non-empty scores/labels".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data(format!(
            "roc_auc needs both classes present (positives: {pos}, negatives: {neg})"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut points = vec![(0.0, 0.0, f64::INFINITY)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let (mut last_fpr, mut last_tpr) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let fpr = fp as f64 / neg as f64;
        let tpr = tp as f64 / pos as f64;
        auc += (fpr - last_fpr) * (tpr + last_tpr) / 2.0;
        points.push((fpr, tpr, t));
        last_fpr = fpr;
        last_tpr = tpr;
    }
    Ok(RocCurve { points, auc })
}

/// One evaluation row: threshold-0.5 metrics plus AUC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

pub fn report_row(scores: &[f64], labels: &[usize]) -> Result<EvalReport> {
    let cm = confusion(scores, labels, 0.5)?;
    let (precision, recall, f1) = precision_recall_f1(&cm);
    let roc = roc_auc(scores, labels)?;
    Ok(EvalReport { accuracy: accuracy(&cm)?, precision, recall, f1, auc: roc.auc })
}

impl EvalReport {
    pub fn values(&self) -> [f64; 5] {
        [self.accuracy, self.precision, self.recall, self.f1, self.auc]
    }

    pub fn rounded(&self) -> [f64; 5] {
        self.values().map(round2)
    }
}

/// Round half away from zero to 2 decimals (report formatting).
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn confusion_basic_and_boundary_rule() {
        let cm = confusion(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 1, fp: 0, tn: 1, fn_: 0 });

        // score == threshold predicts positive (>= rule).
        let cm = confusion(&[0.5, 0.5, 0.5], &[1, 0, 1], 0.5).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 2, fp: 1, tn: 0, fn_: 0 });

        assert!(confusion(&[], &[], 0.5).is_err());
    }

    #[test]
    fn constructed_fixture_reproduces_exact_counts() {
        // TP=33, FP=0, FN=67, TN=900 from synthetic scores.
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..33 {
            scores.push(0.9);
            labels.push(1);
        }
        for _ in 0..67 {
            scores.push(0.2);
            labels.push(1);
        }
        for _ in 0..900 {
            scores.push(0.1);
            labels.push(0);
        }
        let cm = confusion(&scores, &labels, 0.5).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 33, fp: 0, tn: 900, fn_: 67 });
        assert!((accuracy(&cm).unwrap() - 0.933).abs() < 1e-12);
    }

    #[test]
    fn columbia_row_arithmetic() {
        // precision 1.00, recall 0.33 -> F1 = 0.4962..., 0.50 at 2 decimals.
        let cm = ConfusionMatrix { tp: 33, fp: 0, tn: 900, fn_: 67 };
        let (p, r, f1) = precision_recall_f1(&cm);
        assert_eq!(p, 1.0);
        assert_eq!(r, 0.33);
        assert!((f1 - 2.0 * 0.33 / 1.33).abs() < 1e-12);
        assert_eq!(round2(f1), 0.50);
    }

    #[test]
    fn zero_denominator_conventions() {
        let cm = ConfusionMatrix { tp: 0, fp: 0, tn: 5, fn_: 3 };
        let (p, r, f1) = precision_recall_f1(&cm);
        assert_eq!((p, r, f1), (0.0, 0.0, 0.0));
        // Perfect classifier.
        let cm = ConfusionMatrix { tp: 4, fp: 0, tn: 4, fn_: 0 };
        assert_eq!(precision_recall_f1(&cm), (1.0, 1.0, 1.0));
        assert_eq!(accuracy(&cm).unwrap(), 1.0);
        // All wrong.
        let cm = ConfusionMatrix { tp: 0, fp: 4, tn: 0, fn_: 4 };
        assert_eq!(accuracy(&cm).unwrap(), 0.0);
    }

    #[test]
    fn roc_perfect_separation() {
        let roc = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(roc.auc, 1.0);
        assert_eq!(roc.points.first().unwrap(), &(0.0, 0.0, f64::INFINITY));
        assert_eq!(roc.points.last().unwrap(), &(1.0, 1.0, 0.1));
    }

    #[test]
    fn roc_half_concordant_example() {
        // labels [1,1,0,0], scores [0.9,0.2,0.8,0.3]: of the 4 (pos, neg)
        // pairs exactly 2 are concordant -> AUC 0.5.
        let roc = roc_auc(&[0.9, 0.2, 0.8, 0.3], &[1, 1, 0, 0]).unwrap();
        assert_eq!(roc.auc, 0.5);
    }

    #[test]
    fn roc_rejects_single_class() {
        assert!(roc_auc(&[0.4, 0.6], &[1, 1]).is_err());
    }

    /// Independent oracle: the Mann-Whitney pair statistic with ties
    /// counted 1/2.
    fn pair_counting_auc(scores: &[f64], labels: &[usize]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0usize;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
        num / pairs as f64
    }

    #[test]
    fn auc_equals_pair_statistic_on_random_instances() {
        let mut rng = StdRng::seed_from_u64(99);
        for case in 0..50 {
            let n = rng.gen_range(4..60);
            // Coarse score grid forces plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=10) as f64 / 10.0).collect();
            let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let roc = roc_auc(&scores, &labels).unwrap();
            let oracle = pair_counting_auc(&scores, &labels);
            assert!(
                (roc.auc - oracle).abs() < 1e-12,
                "case {case}: trapezoid {} vs pairs {}",
                roc.auc,
                oracle
            );
        }
    }

    #[test]
    fn thresholds_are_monotone_in_tp_and_fp() {
        let mut rng = StdRng::seed_from_u64(5);
        let scores: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<usize> = (0..40).map(|_| rng.gen_range(0..2)).collect();
        let mut last = confusion(&scores, &labels, 0.0).unwrap();
        for step in 1..=10 {
            let cm = confusion(&scores, &labels, step as f64 / 10.0).unwrap();
            assert!(cm.tp <= last.tp && cm.fp <= last.fp, "raising t never adds positives");
            last = cm;
        }
    }

    #[test]
    fn accuracy_is_symmetric_under_relabeling() {
        let mut rng = StdRng::seed_from_u64(6);
        let scores: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<usize> = (0..30).map(|_| rng.gen_range(0..2)).collect();
        let flipped_scores: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        let flipped_labels: Vec<usize> = labels.iter().map(|&y| 1 - y).collect();
        let a = accuracy(&confusion(&scores, &labels, 0.5).unwrap()).unwrap();
        // Complementing scores turns the >= boundary into <=; nudging the
        // threshold keeps boundary samples on the same side.
        let b =
            accuracy(&confusion(&flipped_scores, &flipped_labels, 0.5 + 1e-12).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn f1_is_zero_iff_no_true_positives() {
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..100 {
            let cm = ConfusionMatrix {
                tp: rng.gen_range(0..5),
                fp: rng.gen_range(0..5),
                tn: rng.gen_range(0..5),
                fn_: rng.gen_range(0..5),
            };
            let (p, r, f1) = precision_recall_f1(&cm);
            assert_eq!(f1 == 0.0, cm.tp == 0, "{cm:?}");
            assert!(f1 <= p.max(r) + 1e-12, "harmonic mean below max");
        }
    }

    #[test]
    fn report_row_composes_single_metrics() {
        let scores = [0.9, 0.7, 0.4, 0.2, 0.6];
        let labels = [1, 1, 0, 0, 0];
        let row = report_row(&scores, &labels).unwrap();
        let cm = confusion(&scores, &labels, 0.5).unwrap();
        let (p, r, f1) = precision_recall_f1(&cm);
        assert_eq!(row.accuracy, accuracy(&cm).unwrap());
        assert_eq!((row.precision, row.recall, row.f1), (p, r, f1));
        assert_eq!(row.auc, roc_auc(&scores, &labels).unwrap().auc);

        let perfect = report_row(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap();
        assert_eq!(perfect.values(), [1.0; 5]);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round2(0.005), 0.01);
        assert_eq!(round2(0.4962), 0.50);
        assert_eq!(round2(-0.005), -0.01);
        assert_eq!(round2(0.994999), 0.99);
    }
}
