use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{
    classification_metrics, cohen_kappa, confusion_matrix, krippendorff_alpha_pairs,
    quadratic_weighted_kappa, spearman_rho, AlphaLevel, ConfusionMatrix, MetricsError,
};
use crate::codebook::{
    applicable_units, AnnotationItem, AnnotationType, GroundTruthDataset, ItemKind, Label,
    ResolvedValue,
};
use crate::parser::{NonCompliance, ParsedAnnotation};

/// Prediction label standing in for a non-compliant answer under
/// [`NonCompliancePolicy::Penalize`].
pub const SENTINEL_LABEL: &str = "__noncompliant__";

/// How non-compliant answers enter the metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonCompliancePolicy {
    /// Drop them from the metrics; they only lower the compliance rate.
    #[default]
    Exclude,
    /// Count them as always wrong: a synthetic prediction class for nominal
    /// metrics, and the scale value farthest from the gold label for ordinal
    /// metrics.
    Penalize,
}

impl NonCompliancePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            NonCompliancePolicy::Exclude => "exclude",
            NonCompliancePolicy::Penalize => "penalize",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvaluationScope<'a> {
    /// Restrict evaluation to these units (an evaluation partition, or a
    /// model-path subset). `None` means every applicable unit.
    pub units: Option<&'a BTreeSet<String>>,
    pub policy: NonCompliancePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub item_id: String,
    pub annotation_type: AnnotationType,
    /// Units with a resolved gold value in scope.
    pub n_total: usize,
    /// Units that entered the confusion matrix.
    pub n_evaluated: usize,
    pub n_noncompliant: usize,
    pub noncompliant_by_reason: BTreeMap<NonCompliance, usize>,
    pub compliance_rate: Option<f64>,
    pub accuracy: Option<f64>,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub macro_f1: Option<f64>,
    pub cohen_kappa: Option<f64>,
    pub krippendorff_alpha: Option<f64>,
    pub quadratic_weighted_kappa: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub policy: NonCompliancePolicy,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
}

impl MetricReport {
    fn empty(item_id: String, annotation_type: AnnotationType, policy: NonCompliancePolicy) -> Self {
        MetricReport {
            item_id,
            annotation_type,
            n_total: 0,
            n_evaluated: 0,
            n_noncompliant: 0,
            noncompliant_by_reason: BTreeMap::new(),
            compliance_rate: None,
            accuracy: None,
            macro_precision: None,
            macro_recall: None,
            macro_f1: None,
            cohen_kappa: None,
            krippendorff_alpha: None,
            quadratic_weighted_kappa: None,
            spearman_rho: None,
            policy,
            flags: Vec::new(),
            confusion: None,
        }
    }

    pub fn n_compliant(&self) -> usize {
        self.n_total - self.n_noncompliant
    }
}

fn farthest_scale_value(gold: i64, min: i64, max: i64) -> i64 {
    if gold - min > max - gold {
        min
    } else {
        max
    }
}

/// Scores one item against the ground truth.
///
/// Only units the item applies to under the gold labels are evaluated
/// (nested items are conditioned on the resolved parent), and units whose
/// gold value is unresolved are skipped. Every in-scope unit must have a
/// parsed annotation; units never queried are a coverage gap, which is an
/// error distinct from non-compliance.
pub fn evaluate_item(
    item: &AnnotationItem,
    truth: &GroundTruthDataset,
    parsed: &BTreeMap<String, ParsedAnnotation>,
    scope: &EvaluationScope<'_>,
) -> Result<MetricReport, MetricsError> {
    let mut report = MetricReport::empty(item.id.clone(), item.kind.annotation_type(), scope.policy);
    let mut missing = Vec::new();
    let mut golds: Vec<Label> = Vec::new();
    let mut preds: Vec<Option<Label>> = Vec::new();
    let mut unresolved = 0usize;

    for unit in applicable_units(item, truth)? {
        if scope.units.is_some_and(|s| !s.contains(&unit)) {
            continue;
        }
        let gold = match truth.resolved_value(&unit, &item.id) {
            Some(ResolvedValue::Value(v)) => v.clone(),
            _ => {
                unresolved += 1;
                continue;
            }
        };
        let Some(answer) = parsed.get(&unit) else {
            missing.push(unit);
            continue;
        };
        report.n_total += 1;
        match answer {
            ParsedAnnotation::Value(v) => {
                golds.push(gold);
                preds.push(Some(v.clone()));
            }
            ParsedAnnotation::NonCompliant(reason) => {
                report.n_noncompliant += 1;
                *report.noncompliant_by_reason.entry(*reason).or_default() += 1;
                if scope.policy == NonCompliancePolicy::Penalize {
                    golds.push(gold);
                    preds.push(None);
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(MetricsError::CoverageGap {
            item: item.id.clone(),
            missing,
        });
    }
    if unresolved > 0 {
        report
            .flags
            .push(format!("{unresolved} unit(s) with unresolved gold excluded"));
    }
    if report.n_total > 0 {
        report.compliance_rate = Some(report.n_compliant() as f64 / report.n_total as f64);
    }
    report.n_evaluated = golds.len();
    if golds.is_empty() {
        report.flags.push("no evaluable units".into());
        return Ok(report);
    }

    // Nominal view: the item's labels plus the sentinel class if needed.
    let mut labels = item.kind.labels();
    let sentinel = Label::Text(SENTINEL_LABEL.into());
    let has_sentinel = preds.iter().any(Option::is_none);
    if has_sentinel {
        labels.push(sentinel.clone());
    }
    let nominal_pairs: Vec<(Label, Label)> = golds
        .iter()
        .zip(&preds)
        .map(|(g, p)| (g.clone(), p.clone().unwrap_or_else(|| sentinel.clone())))
        .collect();
    let mut matrix = confusion_matrix(&nominal_pairs, &labels)?;
    if has_sentinel {
        matrix.sentinel = Some(labels.len() - 1);
    }

    let cls = classification_metrics(&matrix)?;
    if cls.zero_denominator {
        report
            .flags
            .push("zero-denominator precision/recall counted as 0".into());
    }
    report.accuracy = Some(cls.accuracy);
    report.macro_precision = Some(cls.macro_precision);
    report.macro_recall = Some(cls.macro_recall);
    report.macro_f1 = Some(cls.macro_f1);
    let kappa = cohen_kappa(&matrix)?;
    if kappa.degenerate {
        report
            .flags
            .push("degenerate chance agreement for kappa".into());
    }
    report.cohen_kappa = Some(kappa.value);

    match &item.kind {
        ItemKind::Likert { min, max, .. } => {
            let ordinal: Vec<(i64, i64)> = golds
                .iter()
                .zip(&preds)
                .map(|(g, p)| {
                    let g = g.as_int().expect("likert gold is integer");
                    let p = match p {
                        Some(l) => l.as_int().expect("likert prediction is integer"),
                        None => farthest_scale_value(g, *min, *max),
                    };
                    (g, p)
                })
                .collect();
            let scale: Vec<Label> = (*min..=*max).map(Label::Int).collect();
            let ord_pairs: Vec<(Label, Label)> = ordinal
                .iter()
                .map(|&(g, p)| (Label::Int(g), Label::Int(p)))
                .collect();
            let ord_matrix = confusion_matrix(&ord_pairs, &scale)?;
            report.quadratic_weighted_kappa = quadratic_weighted_kappa(&ord_matrix)?;
            let gx: Vec<f64> = ordinal.iter().map(|p| p.0 as f64).collect();
            let px: Vec<f64> = ordinal.iter().map(|p| p.1 as f64).collect();
            report.spearman_rho = spearman_rho(&gx, &px)?;
            let alpha_pairs: Vec<(f64, f64)> = gx.into_iter().zip(px).collect();
            report.krippendorff_alpha = krippendorff_alpha_pairs(&alpha_pairs, AlphaLevel::Ordinal);
        }
        _ => {
            let index = |l: &Label| labels.iter().position(|x| x == l).expect("label indexed") as f64;
            let alpha_pairs: Vec<(f64, f64)> =
                nominal_pairs.iter().map(|(g, p)| (index(g), index(p))).collect();
            report.krippendorff_alpha = krippendorff_alpha_pairs(&alpha_pairs, AlphaLevel::Nominal);
        }
    }
    for (name, v) in [
        ("krippendorff_alpha", report.krippendorff_alpha),
        ("quadratic_weighted_kappa", report.quadratic_weighted_kappa),
        ("spearman_rho", report.spearman_rho),
    ] {
        let applicable = name == "krippendorff_alpha" || matches!(item.kind, ItemKind::Likert { .. });
        if applicable && v.is_none() {
            report.flags.push(format!("{name} not applicable"));
        }
    }
    report.confusion = Some(matrix);
    Ok(report)
}

/// Units a nested item would reach if the pipeline followed the model's own
/// parent answers: gold-applicable units whose parsed parent value also
/// equals the required value. Root items return every gold-applicable unit.
pub fn model_path_units(
    item: &AnnotationItem,
    truth: &GroundTruthDataset,
    parsed_parent: &BTreeMap<String, ParsedAnnotation>,
) -> Result<BTreeSet<String>, MetricsError> {
    let gold = applicable_units(item, truth)?;
    let Some(dep) = &item.dependency else {
        return Ok(gold.into_iter().collect());
    };
    Ok(gold
        .into_iter()
        .filter(|u| {
            parsed_parent.get(u).and_then(ParsedAnnotation::value) == Some(&dep.required_parent_value)
        })
        .collect())
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Averages per-item reports of one annotation type.
///
/// Each metric is the unweighted mean over the items where it is defined.
/// Counts are summed and the compliance rate is recomputed from the pooled
/// counts.
pub fn aggregate_item_metrics(reports: &[MetricReport]) -> Result<MetricReport, MetricsError> {
    let first = reports.first().ok_or(MetricsError::NothingToAggregate)?;
    if reports.iter().any(|r| r.annotation_type != first.annotation_type) {
        return Err(MetricsError::MixedAnnotationTypes);
    }
    if reports.len() == 1 {
        return Ok(first.clone());
    }
    let ids: Vec<&str> = reports.iter().map(|r| r.item_id.as_str()).collect();
    let mut out = MetricReport::empty(ids.join("+"), first.annotation_type, first.policy);
    for r in reports {
        out.n_total += r.n_total;
        out.n_evaluated += r.n_evaluated;
        out.n_noncompliant += r.n_noncompliant;
        for (reason, n) in &r.noncompliant_by_reason {
            *out.noncompliant_by_reason.entry(*reason).or_default() += n;
        }
        out.flags
            .extend(r.flags.iter().map(|f| format!("{}: {f}", r.item_id)));
    }
    if out.n_total > 0 {
        out.compliance_rate = Some(out.n_compliant() as f64 / out.n_total as f64);
    }
    out.accuracy = mean_of(reports.iter().map(|r| r.accuracy));
    out.macro_precision = mean_of(reports.iter().map(|r| r.macro_precision));
    out.macro_recall = mean_of(reports.iter().map(|r| r.macro_recall));
    out.macro_f1 = mean_of(reports.iter().map(|r| r.macro_f1));
    out.cohen_kappa = mean_of(reports.iter().map(|r| r.cohen_kappa));
    out.krippendorff_alpha = mean_of(reports.iter().map(|r| r.krippendorff_alpha));
    out.quadratic_weighted_kappa = mean_of(reports.iter().map(|r| r.quadratic_weighted_kappa));
    out.spearman_rho = mean_of(reports.iter().map(|r| r.spearman_rho));
    Ok(out)
}

/// Aggregates a task's item reports per annotation type, in order of first
/// appearance.
pub fn group_by_annotation_type(reports: &[MetricReport]) -> Result<Vec<MetricReport>, MetricsError> {
    let mut order: Vec<AnnotationType> = Vec::new();
    for r in reports {
        if !order.contains(&r.annotation_type) {
            order.push(r.annotation_type);
        }
    }
    order
        .into_iter()
        .map(|t| {
            let group: Vec<MetricReport> = reports
                .iter()
                .filter(|r| r.annotation_type == t)
                .cloned()
                .collect();
            aggregate_item_metrics(&group)
        })
        .collect()
}
