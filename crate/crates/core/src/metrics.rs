//! AUROC, F1, macro averaging, and regression error.

use lamae_tensor::sigmoid;
use serde::{Deserialize, Serialize};

use crate::error::{LamaeError, Result};

/// Probability that a random positive outscores a random negative, counting
/// ties as one half. `None` when the column lacks either class.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Sum of positive ranks with ties sharing their average rank.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| labels[k] > 0.5).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// Counts with a prediction positive when `sigmoid(score) >= threshold`.
pub fn confusion(scores: &[f64], labels: &[f64], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (sigmoid(s) >= threshold, y > 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// `2TP / (2TP + FP + FN)`, or 0 when the denominator is 0.
pub fn f1_from(c: Confusion) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

pub fn f1_score(scores: &[f64], labels: &[f64], threshold: f64) -> f64 {
    f1_from(confusion(scores, labels, threshold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub value: f64,
    /// Indices of columns left out because their metric is undefined.
    pub excluded: Vec<usize>,
}

/// Unweighted mean over the defined values.
pub fn macro_average(values: &[Option<f64>]) -> Result<MacroAverage> {
    let valid: Vec<f64> = values.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(LamaeError::Data("no column has a defined metric".into()));
    }
    Ok(MacroAverage {
        value: valid.iter().sum::<f64>() / valid.len() as f64,
        excluded: values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(i, _)| i)
            .collect(),
    })
}

pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "prediction and target lengths differ");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

/// Column `k` of a row-major `n x cols` matrix.
pub fn column(matrix: &[Vec<f64>], k: usize) -> Vec<f64> {
    matrix.iter().map(|r| r[k]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeMetrics {
    pub code: String,
    pub auroc: Option<f64>,
    pub f1: f64,
    pub positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub per_code: Vec<CodeMetrics>,
    pub macro_auroc: MacroAverage,
    pub macro_f1: f64,
}

/// Per-code and macro metrics from logits `scores[n][k]` and 0/1 `labels`.
pub fn classification_metrics(
    codes: &[String],
    scores: &[Vec<f64>],
    labels: &[Vec<f64>],
    threshold: f64,
) -> Result<ClassificationMetrics> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(LamaeError::Data(format!(
            "{} score rows for {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    let mut per_code = Vec::with_capacity(codes.len());
    for (k, code) in codes.iter().enumerate() {
        let s = column(scores, k);
        let y = column(labels, k);
        per_code.push(CodeMetrics {
            code: code.clone(),
            auroc: auroc(&s, &y),
            f1: f1_score(&s, &y, threshold),
            positives: y.iter().filter(|&&v| v > 0.5).count(),
        });
    }
    let macro_auroc = macro_average(&per_code.iter().map(|c| c.auroc).collect::<Vec<_>>())?;
    let macro_f1 = per_code.iter().map(|c| c.f1).sum::<f64>() / per_code.len().max(1) as f64;
    Ok(ClassificationMetrics {
        per_code,
        macro_auroc,
        macro_f1,
    })
}
