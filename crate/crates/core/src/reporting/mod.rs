//! Result tables, the reporting manifest and performance/efficiency
//! trade-off data. Every document is regenerated from the run directory.

mod manifest;
mod table;
mod tradeoff;

pub use manifest::{
    emit_manifest, validate_manifest, EfficiencySection, HardwareSection, LearningApproachSection, ManifestConfigEfficiency,
    ModelIdentity, PromptFingerprints, PromptTextSection, Quantisation, ReportingManifest, SamplingSection,
    MANIFEST_JSON_SCHEMA, MANIFEST_SCHEMA, SECTION_NAMES,
};
pub use table::{
    compliance_rows, emit_compliance_table, emit_metrics_table, metrics_rows, ComplianceRow, MetricsRow, TableFormat,
};
pub use tradeoff::{
    emit_tradeoff_data, render_tradeoff_csv, render_tradeoff_svg, stage_results, tradeoff_inputs, EfficiencyEntry,
    PerformanceEntry, TradeoffRow,
};

use std::path::Path;

use crate::orchestrator::{cell_outcomes, evaluate_artifacts, EvaluationOptions, OrchestratorError, RunArtifacts, RunEvaluation};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Run(#[from] OrchestratorError),
    #[error("nothing to report")]
    Empty,
    #[error("configuration `{0}` has performance but no efficiency data")]
    MissingEfficiency(String),
    #[error("configuration `{0}` has efficiency but no performance data")]
    MissingPerformance(String),
    #[error("run is incomplete ({pending} cell(s) without an outcome); mark the report partial to emit anyway")]
    Incomplete { pending: usize },
    #[error("manifest is not publication-ready; missing: {}", .0.join(", "))]
    ManifestIncomplete(Vec<String>),
}

/// Every document derived from one run directory.
#[derive(Debug, Clone)]
pub struct ReportDocuments {
    pub evaluation: RunEvaluation,
    pub metrics_csv: String,
    pub metrics_json: String,
    pub compliance_csv: String,
    pub manifest: ReportingManifest,
    pub manifest_json: String,
    pub tradeoff: Vec<TradeoffRow>,
    pub tradeoff_csv: String,
    pub tradeoff_svg: String,
}

/// Evaluates a run from its log and renders all reports. With
/// `allow_partial`, configurations with unqueried cells are left out and
/// the manifest is marked partial.
pub fn build_reports(
    run_dir: &Path,
    policy: Option<crate::metrics::NonCompliancePolicy>,
    allow_partial: bool,
) -> Result<ReportDocuments, ReportError> {
    let art = RunArtifacts::load(run_dir)?;
    let pending = art.header.total_cells.saturating_sub(cell_outcomes(&art.entries).len());
    if pending > 0 && !allow_partial {
        return Err(ReportError::Incomplete { pending });
    }
    let opts = EvaluationOptions {
        policy,
        model_path: false,
        skip_incomplete: allow_partial,
    };
    let evaluation = evaluate_artifacts(&art, &opts)?;
    let rows = metrics_rows(&evaluation);
    let manifest = emit_manifest(&art, &evaluation, allow_partial)?;
    let (perf, eff) = tradeoff_inputs(&evaluation, &art.header);
    let tradeoff = emit_tradeoff_data(&perf, &eff)?;
    Ok(ReportDocuments {
        metrics_csv: emit_metrics_table(&rows, TableFormat::Csv),
        metrics_json: emit_metrics_table(&rows, TableFormat::Json),
        compliance_csv: emit_compliance_table(&compliance_rows(&evaluation)),
        manifest_json: serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
        manifest,
        tradeoff_csv: render_tradeoff_csv(&tradeoff),
        tradeoff_svg: render_tradeoff_svg(&tradeoff),
        tradeoff,
        evaluation,
    })
}

/// Rounds to three decimals, ties to even. Values within 1e-9 of a decimal
/// tie count as ties, so float noise in an exact rational does not decide.
pub fn round3(x: f64) -> f64 {
    let scaled = x * 1000.0;
    let floor = scaled.floor();
    let diff = scaled - floor;
    let r = if (diff - 0.5).abs() < 1e-9 {
        if floor.rem_euclid(2.0) == 0.0 {
            floor
        } else {
            floor + 1.0
        }
    } else {
        scaled.round()
    };
    r / 1000.0
}

/// Three-decimal fixed formatting; absent values print as `NA`.
pub fn fmt3(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => {
            let s = format!("{:.3}", round3(v));
            if s == "-0.000" {
                "0.000".into()
            } else {
                s
            }
        }
        _ => "NA".into(),
    }
}

pub(crate) fn fmt6(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => format!("{v:.6}"),
        _ => "NA".into(),
    }
}

pub(crate) fn write_csv(header: &[String], rows: &[Vec<String>]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv write");
    for r in rows {
        w.write_record(r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}
