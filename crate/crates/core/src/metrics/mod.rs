//! Agreement and classification metrics between model annotations and the
//! resolved human ground truth.
//!
//! Counts are kept as integers and the chance-corrected coefficients are
//! evaluated from integer numerators and denominators, so a hand-checkable
//! matrix gives the exact float nearest to the rational result.

mod alpha;
mod evaluate;

use serde::{Deserialize, Serialize};

use crate::codebook::Label;

pub use alpha::{krippendorff_alpha, krippendorff_alpha_pairs, AlphaLevel};
pub use evaluate::{
    aggregate_item_metrics, evaluate_item, group_by_annotation_type, model_path_units,
    EvaluationScope, MetricReport, NonCompliancePolicy, SENTINEL_LABEL,
};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("value `{0}` is outside the label set")]
    OutsideLabelSet(String),
    #[error("length mismatch: {0} golds vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("no reports to aggregate")]
    NothingToAggregate,
    #[error("cannot aggregate reports of different annotation types")]
    MixedAnnotationTypes,
    #[error("item `{item}`: {} applicable unit(s) were never queried (first: `{}`)", .missing.len(), .missing[0])]
    CoverageGap { item: String, missing: Vec<String> },
    #[error(transparent)]
    Codebook(#[from] crate::codebook::CodebookError),
}

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<Label>,
    pub counts: Vec<Vec<u64>>,
    /// Index of a synthetic prediction-only class (non-compliant answers
    /// under the penalize policy); it never enters macro averages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentinel: Option<usize>,
}

impl ConfusionMatrix {
    pub fn zeros(labels: Vec<Label>) -> Self {
        let k = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; k]; k],
            sentinel: None,
        }
    }

    pub fn from_counts(labels: Vec<Label>, counts: Vec<Vec<u64>>) -> Self {
        assert_eq!(labels.len(), counts.len());
        assert!(counts.iter().all(|r| r.len() == labels.len()));
        ConfusionMatrix {
            labels,
            counts,
            sentinel: None,
        }
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.k())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    fn index_of(&self, label: &Label) -> Result<usize, MetricsError> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| MetricsError::OutsideLabelSet(label.to_string()))
    }
}

pub fn confusion_matrix(
    pairs: &[(Label, Label)],
    labels: &[Label],
) -> Result<ConfusionMatrix, MetricsError> {
    let mut m = ConfusionMatrix::zeros(labels.to_vec());
    for (gold, pred) in pairs {
        let i = m.index_of(gold)?;
        let j = m.index_of(pred)?;
        m.counts[i][j] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub label: Label,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Classes that entered the macro means.
    pub per_class: Vec<ClassScores>,
    /// Some class had a zero precision or recall denominator and contributed 0.
    pub zero_denominator: bool,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Accuracy plus macro-averaged precision, recall and F1.
///
/// Classes with neither actual nor predicted instances are left out of the
/// macro means. A zero denominator for one class contributes 0 and sets
/// `zero_denominator`.
pub fn classification_metrics(m: &ConfusionMatrix) -> Result<ClassificationMetrics, MetricsError> {
    let total = m.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let rows = m.row_sums();
    let cols = m.col_sums();
    let mut per_class = Vec::new();
    let mut zero_denominator = false;
    for c in 0..m.k() {
        if Some(c) == m.sentinel || (rows[c] == 0 && cols[c] == 0) {
            continue;
        }
        let tp = m.counts[c][c];
        let precision = ratio(tp, cols[c]);
        let recall = ratio(tp, rows[c]);
        zero_denominator |= precision.is_none() || recall.is_none();
        let (p, r) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        per_class.push(ClassScores {
            label: m.labels[c].clone(),
            precision: p,
            recall: r,
            f1,
            support: rows[c],
        });
    }
    let n = per_class.len() as f64;
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / n;
    Ok(ClassificationMetrics {
        accuracy: m.trace() as f64 / total as f64,
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        per_class,
        zero_denominator,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: f64,
    /// Chance agreement was 1 (a single label in both margins).
    pub degenerate: bool,
}

/// Cohen's kappa, `(p_o − p_e) / (1 − p_e)`.
///
/// When chance agreement is 1 the value is 1 if observed agreement is also
/// perfect and 0 otherwise, with `degenerate` set.
pub fn cohen_kappa(m: &ConfusionMatrix) -> Result<Kappa, MetricsError> {
    let total = m.total() as u128;
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let rows = m.row_sums();
    let cols = m.col_sums();
    let chance: u128 = rows
        .iter()
        .zip(&cols)
        .map(|(&r, &c)| r as u128 * c as u128)
        .sum();
    let observed = m.trace() as u128 * total;
    let denom = total * total - chance;
    if denom == 0 {
        return Ok(Kappa {
            value: if observed == total * total { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    let num = observed as i128 - chance as i128;
    Ok(Kappa {
        value: num as f64 / denom as f64,
        degenerate: false,
    })
}

/// Quadratic weighted kappa over an ordinal confusion matrix whose labels
/// are in scale order. `None` when the expected disagreement is zero.
pub fn quadratic_weighted_kappa(m: &ConfusionMatrix) -> Result<Option<f64>, MetricsError> {
    let total = m.total() as u128;
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let k = m.k();
    if k < 2 {
        return Ok(None);
    }
    let rows = m.row_sums();
    let cols = m.col_sums();
    // Weights (i-j)^2 / (k-1)^2; the normalizer cancels in the ratio.
    let mut observed: u128 = 0;
    let mut expected: u128 = 0;
    for i in 0..k {
        for j in 0..k {
            let d = i.abs_diff(j) as u128;
            let w = d * d;
            observed += w * m.counts[i][j] as u128;
            expected += w * rows[i] as u128 * cols[j] as u128;
        }
    }
    if expected == 0 {
        return Ok(None);
    }
    Ok(Some(1.0 - (observed * total) as f64 / expected as f64))
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of mid-ranks. `None` when either
/// side is constant or fewer than two pairs are given.
pub fn spearman_rho(golds: &[f64], preds: &[f64]) -> Result<Option<f64>, MetricsError> {
    if golds.len() != preds.len() {
        return Err(MetricsError::LengthMismatch(golds.len(), preds.len()));
    }
    if golds.len() < 2 {
        return Ok(None);
    }
    Ok(pearson(&mid_ranks(golds), &mid_ranks(preds)))
}
