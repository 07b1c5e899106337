//! AUROC and balanced accuracy, plus the per-fold report table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Validation("labels must be 0 or 1".into()));
    }
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("NaN score".into()));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Rank-sum form, `O(n log n)`.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mid-ranks over tie groups (1-based), summed over positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Mean of sensitivity and specificity when predicting positive for
/// `score >= threshold`.
pub fn balanced_accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut tp = 0;
    let mut tn = 0;
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    Ok((tp as f64 / pos as f64 + tn as f64 / neg as f64) / 2.0)
}

/// Threshold maximizing balanced accuracy; candidates are the observed
/// scores, ties to the smallest threshold.
pub fn best_threshold(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    class_counts(labels)?;
    let mut candidates = scores.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for &t in &candidates {
        let b = balanced_accuracy(scores, labels, t)?;
        if b > best.0 {
            best = (b, t);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auroc: f64,
    pub bacc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Logit threshold used for `bacc`.
    pub threshold: f64,
}

/// Evaluates logits at the given threshold (logit 0 = probability 0.5).
pub fn evaluate(logits: &[f64], labels: &[u8], threshold: f64) -> Result<EvalResult> {
    let (n_pos, n_neg) = class_counts(labels)?;
    Ok(EvalResult {
        auroc: auroc(logits, labels)?,
        bacc: balanced_accuracy(logits, labels, threshold)?,
        n_pos,
        n_neg,
        threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    /// Threshold at logit 0.
    pub test: EvalResult,
    /// Threshold chosen to maximize validation Bacc.
    pub test_tuned: EvalResult,
    pub best_epoch: usize,
    pub val_auroc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd { mean: f64::NAN, std: f64::NAN };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub folds: Vec<FoldMetrics>,
    pub skipped_folds: Vec<usize>,
    pub auroc: MeanStd,
    pub bacc: MeanStd,
    pub bacc_tuned: MeanStd,
}

impl Report {
    pub fn from_folds(folds: Vec<FoldMetrics>, skipped_folds: Vec<usize>) -> Self {
        let col = |f: fn(&FoldMetrics) -> f64| mean_std(&folds.iter().map(f).collect::<Vec<_>>());
        Report {
            auroc: col(|f| f.test.auroc),
            bacc: col(|f| f.test.bacc),
            bacc_tuned: col(|f| f.test_tuned.bacc),
            folds,
            skipped_folds,
        }
    }

    /// Plain-text table with `mean ± std` rows.
    pub fn table(&self) -> String {
        let mut out = String::from("fold  auroc   bacc    bacc*   epoch\n");
        for f in &self.folds {
            out.push_str(&format!(
                "{:<5} {:.4}  {:.4}  {:.4}  {}\n",
                f.fold, f.test.auroc, f.test.bacc, f.test_tuned.bacc, f.best_epoch
            ));
        }
        out.push_str(&format!(
            "mean  {:.4}±{:.4}  {:.4}±{:.4}  {:.4}±{:.4}\n",
            self.auroc.mean, self.auroc.std, self.bacc.mean, self.bacc.std, self.bacc_tuned.mean, self.bacc_tuned.std
        ));
        out
    }
}
