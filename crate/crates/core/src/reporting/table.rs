use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{fmt3, write_csv};
use crate::codebook::AnnotationType;
use crate::metrics::MetricReport;
use crate::orchestrator::RunEvaluation;
use crate::parser::NonCompliance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Json,
}

/// One result line: a configuration's score on a task (or on one
/// annotation type of a task that mixes types).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub approach: String,
    pub style: String,
    pub repeat: u32,
    pub task: String,
    pub annotation_type: AnnotationType,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub kappa: Option<f64>,
    pub alpha: Option<f64>,
    pub qwk: Option<f64>,
    pub rho: Option<f64>,
    pub n_total: usize,
    pub n_evaluated: usize,
    pub n_noncompliant: usize,
    pub compliance_rate: Option<f64>,
}

impl MetricsRow {
    pub fn from_report(model: &str, approach: &str, style: &str, repeat: u32, task: &str, r: &MetricReport) -> Self {
        MetricsRow {
            model: model.into(),
            approach: approach.into(),
            style: style.into(),
            repeat,
            task: task.into(),
            annotation_type: r.annotation_type,
            f1: r.macro_f1,
            accuracy: r.accuracy,
            precision: r.macro_precision,
            recall: r.macro_recall,
            kappa: r.cohen_kappa,
            alpha: r.krippendorff_alpha,
            qwk: r.quadratic_weighted_kappa,
            rho: r.spearman_rho,
            n_total: r.n_total,
            n_evaluated: r.n_evaluated,
            n_noncompliant: r.n_noncompliant,
            compliance_rate: r.compliance_rate,
        }
    }

    fn sort_key(&self) -> (&str, &str, &str, u32, &str) {
        (&self.model, &self.approach, &self.style, self.repeat, &self.task)
    }
}

/// Rows for every configuration and annotation-type group, sorted by
/// model, approach, style, repeat and task. A task mixing annotation types
/// gets one row per type, labelled `task:type`.
pub fn metrics_rows(eval: &RunEvaluation) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for c in &eval.configs {
        let mixed = c.groups.len() > 1;
        for g in &c.groups {
            let task = if mixed {
                format!("{}:{}", c.config.task, g.annotation_type.as_str())
            } else {
                c.config.task.clone()
            };
            rows.push(MetricsRow::from_report(
                &c.config.model,
                &c.config.approach_label,
                c.config.style.label(),
                c.config.repeat,
                &task,
                g,
            ));
        }
    }
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    rows
}

struct Layout {
    approach: bool,
    style: bool,
    repeat: bool,
    ordinal: bool,
}

impl Layout {
    fn of(rows: &[MetricsRow]) -> Self {
        let distinct = |f: fn(&MetricsRow) -> String| rows.iter().map(f).collect::<BTreeSet<_>>().len() > 1;
        Layout {
            approach: distinct(|r| r.approach.clone()),
            style: distinct(|r| r.style.clone()),
            repeat: distinct(|r| r.repeat.to_string()),
            ordinal: rows.iter().any(|r| r.qwk.is_some() || r.rho.is_some()),
        }
    }

    fn key_header(&self) -> Vec<String> {
        let mut h = vec!["Model".to_owned()];
        if self.approach {
            h.push("Learning Approach".into());
        }
        if self.style {
            h.push("Prompt Style".into());
        }
        if self.repeat {
            h.push("Repeat".into());
        }
        h.push("Task".into());
        h
    }

    fn key_cells(&self, r: &MetricsRow) -> Vec<String> {
        let mut c = vec![r.model.clone()];
        if self.approach {
            c.push(r.approach.clone());
        }
        if self.style {
            c.push(r.style.clone());
        }
        if self.repeat {
            c.push(r.repeat.to_string());
        }
        c.push(r.task.clone());
        c
    }
}

/// The results table: `Model, [Learning Approach], [Prompt Style], Task,
/// F1, Accuracy, Precision, Recall, kappa, alpha[, QWK, rho]`. Approach and
/// style columns appear when those axes vary; QWK and rho when any row has
/// an ordinal score. Values use three decimals; undefined values print `NA`.
pub fn emit_metrics_table(rows: &[MetricsRow], format: TableFormat) -> String {
    match format {
        TableFormat::Json => {
            let mut s = serde_json::to_string_pretty(rows).expect("rows serialize");
            s.push('\n');
            s
        }
        TableFormat::Csv => {
            let layout = Layout::of(rows);
            let mut header = layout.key_header();
            header.extend(["F1", "Accuracy", "Precision", "Recall", "kappa", "alpha"].map(String::from));
            if layout.ordinal {
                header.extend(["QWK", "rho"].map(String::from));
            }
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let mut c = layout.key_cells(r);
                    c.extend([r.f1, r.accuracy, r.precision, r.recall, r.kappa, r.alpha].map(fmt3));
                    if layout.ordinal {
                        c.extend([r.qwk, r.rho].map(fmt3));
                    }
                    c
                })
                .collect();
            write_csv(&header, &body)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceRow {
    pub model: String,
    pub approach: String,
    pub style: String,
    pub repeat: u32,
    pub task: String,
    pub item_id: String,
    pub n_total: usize,
    pub n_noncompliant: usize,
    pub compliance_rate: Option<f64>,
    pub by_reason: Vec<(NonCompliance, usize)>,
}

/// Per-item compliance, in the same order as the metrics table.
pub fn compliance_rows(eval: &RunEvaluation) -> Vec<ComplianceRow> {
    let mut rows: Vec<ComplianceRow> = eval
        .configs
        .iter()
        .flat_map(|c| {
            c.items.iter().map(move |r| ComplianceRow {
                model: c.config.model.clone(),
                approach: c.config.approach_label.clone(),
                style: c.config.style.label().to_owned(),
                repeat: c.config.repeat,
                task: c.config.task.clone(),
                item_id: r.item_id.clone(),
                n_total: r.n_total,
                n_noncompliant: r.n_noncompliant,
                compliance_rate: r.compliance_rate,
                by_reason: NonCompliance::ALL
                    .iter()
                    .map(|k| (*k, r.noncompliant_by_reason.get(k).copied().unwrap_or(0)))
                    .collect(),
            })
        })
        .collect();
    rows.sort_by(|a, b| {
        (&a.model, &a.approach, &a.style, a.repeat, &a.task).cmp(&(&b.model, &b.approach, &b.style, b.repeat, &b.task))
    });
    rows
}

pub fn emit_compliance_table(rows: &[ComplianceRow]) -> String {
    let mut header: Vec<String> = [
        "Model",
        "Learning Approach",
        "Prompt Style",
        "Repeat",
        "Task",
        "Item",
        "Total",
        "Non-compliant",
        "Compliance",
    ]
    .map(String::from)
    .to_vec();
    header.extend(NonCompliance::ALL.iter().map(|k| k.as_str().to_owned()));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut c = vec![
                r.model.clone(),
                r.approach.clone(),
                r.style.clone(),
                r.repeat.to_string(),
                r.task.clone(),
                r.item_id.clone(),
                r.n_total.to_string(),
                r.n_noncompliant.to_string(),
                fmt3(r.compliance_rate),
            ];
            c.extend(r.by_reason.iter().map(|(_, n)| n.to_string()));
            c
        })
        .collect();
    write_csv(&header, &body)
}
