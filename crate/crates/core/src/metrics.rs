//! Classification metrics: confusion counts, accuracy/precision/recall/F1
//! and ROC curves with trapezoidal AUC.
//!
//! The positive class is a parameter. The pipeline uses `Fake` (label 0) as
//! the detection target.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_binary(name: &str, values: &[usize]) -> Result<()> {
    match values.iter().find(|&&v| v > 1) {
        Some(v) => Err(Error::Contract(format!("{name} must be binary, found {v}"))),
        None => Ok(()),
    }
}

/// Exact confusion counts of `preds` against `labels` with respect to
/// `positive`.
pub fn confusion(preds: &[usize], labels: &[usize], positive: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::Contract("confusion needs at least one sample".into()));
    }
    check_binary("predictions", preds)?;
    check_binary("labels", labels)?;
    check_binary("positive class", &[positive])?;
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == positive, l == positive) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Accuracy, precision, recall and F1. A metric whose denominator is zero is
/// reported as 0 and flagged.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

impl ClassificationReport {
    pub fn any_undefined(&self) -> bool {
        self.precision_undefined || self.recall_undefined || self.f1_undefined
    }
}

/// Harmonic mean of precision and recall; `None` when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> Option<f64> {
    let s = precision + recall;
    (s > 0.0).then(|| 2.0 * precision * recall / s)
}

pub fn prf1(cm: &ConfusionMatrix) -> Result<ClassificationReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    let ratio = |num: u64, den: u64| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
    let accuracy = (cm.tp + cm.tn) as f64 / total as f64;
    let (precision, precision_undefined) = ratio(cm.tp, cm.tp + cm.fp);
    let (recall, recall_undefined) = ratio(cm.tp, cm.tp + cm.fn_);
    let (f1, f1_undefined) = match f1_score(precision, recall) {
        Some(f) => (f, false),
        None => (0.0, true),
    };
    Ok(ClassificationReport { accuracy, precision, recall, f1, precision_undefined, recall_undefined, f1_undefined })
}

/// ROC points from the origin to `(1, 1)` and the trapezoidal area.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(false positive rate, true positive rate)`, FPR nondecreasing.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Sweeps a threshold down through the distinct `scores` (higher means more
/// likely `positive`). Tied scores enter together, so the area equals the
/// Mann-Whitney pair estimate exactly.
pub fn roc_auc(scores: &[f64], labels: &[usize], positive: usize) -> Result<RocCurve> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Contract(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Contract("scores contain NaN".into()));
    }
    check_binary("labels", labels)?;
    let pos = labels.iter().filter(|&&l| l == positive).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Contract("ROC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area in units of 1 / (pos * neg).
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += u128::from(fp - fp0) * u128::from(tp + tp0);
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = area2 as f64 / (2 * u128::from(pos) * u128::from(neg)) as f64;
    Ok(RocCurve { points, auc })
}

/// `metric,value` CSV with accuracy, precision, recall, f1 and auc.
pub fn metrics_csv(report: &ClassificationReport, auc: f64) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in [
        ("accuracy", report.accuracy),
        ("precision", report.precision),
        ("recall", report.recall),
        ("f1", report.f1),
        ("auc", auc),
    ] {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

/// `fpr,tpr` CSV of the curve points.
pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (x, y) in &curve.points {
        let _ = writeln!(out, "{x},{y}");
    }
    out
}
