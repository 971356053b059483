//! Recording-level evaluation metrics: AP, ROC AUC, lwlrap and thresholded
//! per-class accuracy.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Indices sorted by descending score; equal scores keep their input order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Average precision of one class column, `None` without positives.
///
/// Ties are broken by original sample order.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Option<f64> {
    debug_assert_eq!(scores.len(), truth.len());
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, i) in ranking(scores).into_iter().enumerate() {
        if truth[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / positives as f64)
}

/// Area under the ROC curve as `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`, `None` unless
/// both classes are present.
pub fn auc_roc(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // twice the Mann-Whitney statistic, kept integral
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let (p, n) = idx[i..j]
            .iter()
            .fold((0u64, 0u64), |(p, n), &k| if truth[k] { (p + 1, n) } else { (p, n + 1) });
        twice_u += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Some(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Label-weighted label-ranking average precision over `[samples × C]`.
///
/// Every positive label contributes the fraction of true labels among the
/// labels scored at least as high as it; contributions are averaged over all
/// positive labels in the data. `None` if there are no positive labels.
pub fn lwlrap(scores: &[Vec<f64>], truth: &[Vec<bool>]) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (s, t) in scores.iter().zip(truth) {
        for (c, _) in t.iter().enumerate().filter(|(_, &on)| on) {
            let rank = s.iter().filter(|&&v| v >= s[c]).count();
            let hits = s.iter().zip(t).filter(|(&v, &on)| on && v >= s[c]).count();
            total += hits as f64 / rank as f64;
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}

/// Per-class rate at which `score >= threshold` agrees with the truth.
pub fn per_class_accuracy(scores: &[Vec<f64>], truth: &[Vec<bool>], threshold: f64) -> Vec<Option<f64>> {
    let c = truth.first().map_or(0, Vec::len);
    (0..c)
        .map(|ci| {
            let n = scores.len();
            (n > 0).then(|| {
                let agree = scores
                    .iter()
                    .zip(truth)
                    .filter(|(s, t)| (s[ci] >= threshold) == t[ci])
                    .count();
                agree as f64 / n as f64
            })
        })
        .collect()
}

fn column<T: Copy>(rows: &[Vec<T>], c: usize) -> Vec<T> {
    rows.iter().map(|r| r[c]).collect()
}

fn check(scores: &[Vec<f64>], truth: &[Vec<bool>]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Empty("evaluation batch"));
    }
    if scores.len() != truth.len() {
        return Err(Error::shape("metrics", &[scores.len()], &[truth.len()]));
    }
    let c = truth[0].len();
    if scores.iter().any(|r| r.len() != c) || truth.iter().any(|r| r.len() != c) {
        return Err(Error::shape("metrics", &[scores.len(), c], &[truth.len(), c]));
    }
    Ok(c)
}

/// Unweighted mean AP over classes with at least one positive.
pub fn mean_average_precision(scores: &[Vec<f64>], truth: &[Vec<bool>]) -> Result<f64> {
    let c = check(scores, truth)?;
    let aps: Vec<f64> = (0..c)
        .filter_map(|ci| average_precision(&column(scores, ci), &column(truth, ci)))
        .collect();
    if aps.is_empty() {
        return Err(Error::Invalid("no class has a positive example".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub positives: usize,
    pub ap: Option<f64>,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub threshold: f64,
    pub classes: Vec<ClassMetrics>,
    pub map: f64,
    pub mauc: Option<f64>,
    pub lwlrap: Option<f64>,
    pub mean_accuracy: f64,
    /// Classes without positives, left out of mAP.
    pub excluded: Vec<usize>,
}

impl MetricsReport {
    pub fn compute(scores: &[Vec<f64>], truth: &[Vec<bool>], threshold: f64) -> Result<Self> {
        let c = check(scores, truth)?;
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::OutOfRange {
                name: "threshold",
                value: threshold,
                lo: 0.0,
                hi: 1.0,
            });
        }
        let acc = per_class_accuracy(scores, truth, threshold);
        let classes: Vec<ClassMetrics> = (0..c)
            .map(|ci| {
                let s = column(scores, ci);
                let t = column(truth, ci);
                ClassMetrics {
                    class: ci,
                    positives: t.iter().filter(|&&v| v).count(),
                    ap: average_precision(&s, &t),
                    auc: auc_roc(&s, &t),
                    accuracy: acc[ci],
                }
            })
            .collect();
        let excluded: Vec<usize> = classes.iter().filter(|m| m.ap.is_none()).map(|m| m.class).collect();
        let aps: Vec<f64> = classes.iter().filter_map(|m| m.ap).collect();
        if aps.is_empty() {
            return Err(Error::Invalid("no class has a positive example".into()));
        }
        let aucs: Vec<f64> = classes.iter().filter_map(|m| m.auc).collect();
        let accs: Vec<f64> = classes.iter().filter_map(|m| m.accuracy).collect();
        Ok(Self {
            samples: scores.len(),
            threshold,
            map: aps.iter().sum::<f64>() / aps.len() as f64,
            mauc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
            lwlrap: lwlrap(scores, truth),
            mean_accuracy: accs.iter().sum::<f64>() / accs.len().max(1) as f64,
            classes,
            excluded,
        })
    }

    /// One row per class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,positives,ap,auc,accuracy\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for m in &self.classes {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                m.class,
                m.positives,
                opt(m.ap),
                opt(m.auc),
                opt(m.accuracy)
            );
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "samples": self.samples,
            "threshold": self.threshold,
            "map": self.map,
            "mauc": self.mauc,
            "lwlrap": self.lwlrap,
            "mean_accuracy": self.mean_accuracy,
            "excluded_classes": self.excluded,
        })
    }
}
