//! Detection metrics: precision, recall, F1, ROC AUC and point adjustment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Harmonic mean, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall)
}

/// Zero denominators give 0 rather than NaN.
pub fn precision_recall_f1(pred: &[u8], truth: &[u8]) -> Result<Prf> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    let precision = ratio(tp as f64, (tp + fp) as f64);
    let recall = ratio(tp as f64, (tp + fne) as f64);
    Ok(Prf {
        precision,
        recall,
        f1: f1_score(precision, recall),
    })
}

/// Area under the ROC curve as the Mann–Whitney statistic, with tied
/// scores counted as half.
pub fn auc(scores: &[f64], truth: &[u8]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            truth.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let pos = truth.iter().filter(|&&t| t != 0).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| truth[k] != 0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Flags every timestamp of a true segment that has at least one hit.
pub fn point_adjust(pred: &[u8], truth: &[u8]) -> Result<Vec<u8>> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut out: Vec<u8> = pred.iter().map(|&p| u8::from(p != 0)).collect();
    let mut start = 0;
    while start < truth.len() {
        if truth[start] == 0 {
            start += 1;
            continue;
        }
        let mut end = start;
        while end < truth.len() && truth[end] != 0 {
            end += 1;
        }
        if out[start..end].iter().any(|&p| p != 0) {
            out[start..end].fill(1);
        }
        start = end;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    /// Number of timestamps evaluated (the warm-up region is excluded).
    pub evaluated: usize,
    pub auc: Option<f64>,
    pub raw: Prf,
    pub point_adjusted: Prf,
}

/// Metrics over `scores[from..]`, reporting both the raw and the
/// point-adjusted protocol.
pub fn evaluate(scores: &[f64], detected: &[u8], truth: &[u8], from: usize, threshold: f64) -> Result<MetricsReport> {
    if scores.len() != truth.len() || detected.len() != truth.len() {
        return Err(Error::Shape(format!(
            "trace has {} timestamps, labels {}",
            scores.len(),
            truth.len()
        )));
    }
    let from = from.min(truth.len());
    let (s, d, t) = (&scores[from..], &detected[from..], &truth[from..]);
    let auc = match auc(s, t) {
        Ok(a) => Some(a),
        Err(Error::Data(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        threshold,
        evaluated: t.len(),
        auc,
        raw: precision_recall_f1(d, t)?,
        point_adjusted: precision_recall_f1(&point_adjust(d, t)?, t)?,
    })
}
