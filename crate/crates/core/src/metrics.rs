//! Classification metrics: confusion matrix, accuracy, precision/recall/F1,
//! micro-averaged F1, and rank-based ROC-AUC, with an ID/OOD breakdown.
//!
//! Two F1 conventions are reported side by side: `f1_positive` is the
//! positive-class F1 of a binary task, while `micro_f1` micro-averages over
//! all classes (which for single-label classification equals accuracy).

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::fmath;
use crate::tensor::Tensor;

/// Metrics for one subject group. All rates are in [0, 1]; empty denominators
/// yield 0 so degenerate groups stay well-defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub count: usize,
    pub accuracy: f64,
    /// Positive-class precision (class index 1); 0 for non-binary tasks.
    pub precision: f64,
    /// Positive-class recall (class index 1); 0 for non-binary tasks.
    pub recall: f64,
    /// Positive-class F1 (class index 1); 0 for non-binary tasks.
    pub f1_positive: f64,
    /// Micro-averaged F1 over all classes.
    pub micro_f1: f64,
    /// Mann-Whitney ROC-AUC of the positive-class probability; `None` unless
    /// the task is binary with both classes present.
    pub roc_auc: Option<f64>,
    /// Row = true class, column = predicted class.
    pub confusion: Vec<Vec<usize>>,
}

/// Evaluation summary: overall metrics plus the ID/OOD breakdown when site
/// membership is known. Groups with no subjects are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: GroupMetrics,
    pub id: Option<GroupMetrics>,
    pub ood: Option<GroupMetrics>,
}

/// Row-wise softmax with the usual max-shift for stability.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (r, c) = logits.shape();
    Tensor::from_fn(r, c, |i, j| {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| fmath::exp(v - m)).sum();
        fmath::exp(logits.get(i, j) - m) / denom
    })
}

/// Argmax per row; ties resolve to the lowest class index.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let (r, c) = logits.shape();
    (0..r)
        .map(|i| {
            let mut best = 0;
            for j in 1..c {
                if logits.get(i, j) > logits.get(i, best) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Confusion counts, rows = true class, columns = predicted class.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    assert_eq!(preds.len(), labels.len());
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        assert!(p < classes && y < classes, "class index out of range");
        m[y][p] += 1;
    }
    m
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Mann-Whitney ROC-AUC: the probability that a random positive outranks a
/// random negative, ties counting one half. `None` when either class is
/// absent.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positives.len());
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &pos) in positives.iter().enumerate() {
        if !pos {
            continue;
        }
        for (j, &other) in positives.iter().enumerate() {
            if other {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// All metrics for one group from its logits and labels.
pub fn group_metrics(logits: &Tensor, labels: &[usize], classes: usize) -> GroupMetrics {
    assert_eq!(logits.rows(), labels.len());
    assert_eq!(logits.cols(), classes);
    let preds = predictions(logits);
    let confusion = confusion_matrix(&preds, labels, classes);
    let total = labels.len();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let accuracy = ratio(correct as f64, total as f64);

    // Micro-averaging counts each prediction once as TP or (FP and FN), so
    // precision = recall = accuracy for single-label tasks; kept in the
    // general form for clarity.
    let micro_tp = correct as f64;
    let micro_fp = (total - correct) as f64;
    let micro_fn = (total - correct) as f64;
    let micro_p = ratio(micro_tp, micro_tp + micro_fp);
    let micro_r = ratio(micro_tp, micro_tp + micro_fn);
    let micro_f1 = ratio(2.0 * micro_p * micro_r, micro_p + micro_r);

    let (precision, recall, f1_positive, auc) = if classes == 2 {
        let tp = confusion[1][1] as f64;
        let fp = confusion[0][1] as f64;
        let fn_ = confusion[1][0] as f64;
        let p = ratio(tp, tp + fp);
        let r = ratio(tp, tp + fn_);
        let f1 = ratio(2.0 * p * r, p + r);
        let probs = softmax_rows(logits);
        let scores: Vec<f64> = (0..total).map(|i| probs.get(i, 1)).collect();
        let positives: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        (p, r, f1, roc_auc(&scores, &positives))
    } else {
        (0.0, 0.0, 0.0, None)
    };

    GroupMetrics {
        count: total,
        accuracy,
        precision,
        recall,
        f1_positive,
        micro_f1,
        roc_auc: auc,
        confusion,
    }
}

/// Build the full report. `is_ood[i]` marks subject i as belonging to the
/// held-out site; pass `None` when membership is unknown (no breakdown).
pub fn metrics_report(
    logits: &Tensor,
    labels: &[usize],
    classes: usize,
    is_ood: Option<&[bool]>,
) -> MetricsReport {
    let overall = group_metrics(logits, labels, classes);
    let (id, ood) = match is_ood {
        Some(flags) => {
            assert_eq!(flags.len(), labels.len());
            let split = |want: bool| -> Option<GroupMetrics> {
                let idx: Vec<usize> = (0..labels.len()).filter(|&i| flags[i] == want).collect();
                if idx.is_empty() {
                    return None;
                }
                let sub_logits =
                    Tensor::from_fn(idx.len(), classes, |i, j| logits.get(idx[i], j));
                let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                Some(group_metrics(&sub_logits, &sub_labels, classes))
            };
            (split(false), split(true))
        }
        None => (None, None),
    };
    MetricsReport { overall, id, ood }
}

/// Mean and sample standard deviation (n-1 denominator; 0 for a single
/// value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty(), "mean of an empty slice");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, fmath::sqrt(ss / (n - 1.0)))
}
