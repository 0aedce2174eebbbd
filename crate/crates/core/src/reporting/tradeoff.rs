use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{fmt3, fmt6, write_csv, ReportError};
use crate::orchestrator::{RunEvaluation, RunHeader, StageResult};
use crate::prompt::{ApproachKind, StyleKind};

/// F1 of one configuration on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceEntry {
    /// Configuration id without the task: `model/style/approach[/rN]`.
    pub config_id: String,
    pub task: String,
    pub f1: Option<f64>,
}

/// Efficiency of one configuration on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyEntry {
    pub config_id: String,
    pub task: String,
    pub model: String,
    pub style: StyleKind,
    pub approach: ApproachKind,
    pub parameter_count: Option<u64>,
    pub energy_kwh: Option<f64>,
    pub total_inference_s: f64,
    pub total_output_chars: u64,
    pub n_queries: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub config_id: String,
    pub model: String,
    pub style: StyleKind,
    pub approach: ApproachKind,
    /// Mean over tasks of each task's F1.
    pub mean_f1: Option<f64>,
    /// `None` when any contributing window lacks a measurement.
    pub energy_kwh: Option<f64>,
    pub total_output_chars: u64,
    pub total_inference_s: f64,
    pub avg_inference_s: Option<f64>,
    pub parameter_count: Option<u64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Splits an evaluated run into per-task performance and efficiency
/// entries. A task's F1 is the mean of its annotation-type groups.
pub fn tradeoff_inputs(eval: &RunEvaluation, header: &RunHeader) -> (Vec<PerformanceEntry>, Vec<EfficiencyEntry>) {
    let mut perf = Vec::new();
    let mut eff = Vec::new();
    for c in &eval.configs {
        let key = c.config.id.split_once('/').map_or(c.config.id.as_str(), |(_, rest)| rest);
        perf.push(PerformanceEntry {
            config_id: key.to_owned(),
            task: c.config.task.clone(),
            f1: mean(c.groups.iter().filter_map(|g| g.macro_f1)),
        });
        eff.push(EfficiencyEntry {
            config_id: key.to_owned(),
            task: c.config.task.clone(),
            model: c.config.model.clone(),
            style: c.config.style.kind(),
            approach: c.config.approach.kind(),
            parameter_count: header
                .config
                .models
                .iter()
                .find(|m| m.name == c.config.model)
                .map(|m| m.parameter_count),
            energy_kwh: c.efficiency.total_energy_kwh,
            total_inference_s: c.efficiency.total_inference_s,
            total_output_chars: c.efficiency.total_output_chars,
            n_queries: c.efficiency.n_queries,
        });
    }
    (perf, eff)
}

/// One row per configuration across tasks: mean F1 next to summed energy,
/// output length and inference time.
pub fn emit_tradeoff_data(
    performance: &[PerformanceEntry],
    efficiency: &[EfficiencyEntry],
) -> Result<Vec<TradeoffRow>, ReportError> {
    if performance.is_empty() && efficiency.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut f1s: BTreeMap<&str, Vec<Option<f64>>> = BTreeMap::new();
    for p in performance {
        f1s.entry(&p.config_id).or_default().push(p.f1);
    }
    let mut effs: BTreeMap<&str, Vec<&EfficiencyEntry>> = BTreeMap::new();
    for e in efficiency {
        effs.entry(&e.config_id).or_default().push(e);
    }
    if let Some(id) = f1s.keys().find(|k| !effs.contains_key(*k)) {
        return Err(ReportError::MissingEfficiency((*id).to_owned()));
    }
    if let Some(id) = effs.keys().find(|k| !f1s.contains_key(*k)) {
        return Err(ReportError::MissingPerformance((*id).to_owned()));
    }

    let rows = effs
        .into_iter()
        .map(|(id, es)| {
            let first = es[0];
            let total_inference_s: f64 = es.iter().map(|e| e.total_inference_s).sum();
            let n_queries: u64 = es.iter().map(|e| e.n_queries).sum();
            TradeoffRow {
                config_id: id.to_owned(),
                model: first.model.clone(),
                style: first.style,
                approach: first.approach,
                mean_f1: mean(f1s[id].iter().flatten().copied()),
                energy_kwh: es.iter().map(|e| e.energy_kwh).sum(),
                total_output_chars: es.iter().map(|e| e.total_output_chars).sum(),
                total_inference_s,
                avg_inference_s: (n_queries > 0).then(|| total_inference_s / n_queries as f64),
                parameter_count: first.parameter_count,
            }
        })
        .collect();
    Ok(rows)
}

pub fn render_tradeoff_csv(rows: &[TradeoffRow]) -> String {
    let header: Vec<String> = [
        "config",
        "model",
        "style",
        "approach",
        "mean_f1",
        "energy_kwh",
        "total_output_chars",
        "total_inference_s",
        "avg_inference_s",
        "parameter_count",
    ]
    .map(String::from)
    .to_vec();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.config_id.clone(),
                r.model.clone(),
                style_label(r.style).to_owned(),
                approach_label(r.approach).to_owned(),
                fmt3(r.mean_f1),
                fmt6(r.energy_kwh),
                r.total_output_chars.to_string(),
                fmt6(Some(r.total_inference_s)),
                fmt6(r.avg_inference_s),
                r.parameter_count.map_or_else(|| "NA".into(), |p| p.to_string()),
            ]
        })
        .collect();
    write_csv(&header, &body)
}

fn style_label(s: StyleKind) -> &'static str {
    match s {
        StyleKind::Standard => "standard",
        StyleKind::Persona => "persona",
        StyleKind::Cot => "CoT",
    }
}

fn approach_label(a: ApproachKind) -> &'static str {
    match a {
        ApproachKind::ZeroShot => "Zero-Shot",
        ApproachKind::FewShot => "Few-Shot",
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Static scatter of mean F1 against energy. Rows without an energy
/// measurement are listed under the plot instead of drawn.
pub fn render_tradeoff_svg(rows: &[TradeoffRow]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 200.0;
    const TOP: f64 = 30.0;
    const BOTTOM: f64 = 60.0;
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;

    let plotted: Vec<(&TradeoffRow, f64, f64)> = rows
        .iter()
        .filter_map(|r| Some((r, r.energy_kwh?, r.mean_f1?)))
        .collect();
    let unplotted: Vec<&str> = rows
        .iter()
        .filter(|r| r.energy_kwh.is_none() || r.mean_f1.is_none())
        .map(|r| r.config_id.as_str())
        .collect();
    let max_e = plotted.iter().map(|p| p.1).fold(0.0_f64, f64::max);
    let max_e = if max_e > 0.0 { max_e * 1.05 } else { 1.0 };
    let x = |e: f64| LEFT + e / max_e * pw;
    let y = |f: f64| TOP + (1.0 - f.clamp(0.0, 1.0)) * ph;

    let mut s = String::new();
    let height = H + 16.0 * unplotted.len() as f64;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let e = max_e * f;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{f:.2}</text>"#, LEFT - 6.0, y(f) + 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{e:.3}</text>"#, x(e), TOP + ph + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">Energy (kWh)</text>"#, LEFT + pw / 2.0, H - 18.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">Mean F1</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (r, e, f) in &plotted {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="steelblue"><title>{}</title></circle>"#,
            x(*e),
            y(*f),
            escape(&r.config_id)
        );
    }
    for (i, (r, e, f)) in plotted.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}. {} ({:.3}, {:.3})</text>"#,
            W - RIGHT + 10.0,
            TOP + 12.0 + 14.0 * i as f64,
            i + 1,
            escape(&r.config_id),
            f,
            e
        );
    }
    for (i, id) in unplotted.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{LEFT}" y="{:.1}">not plotted (no energy or F1): {}</text>"#,
            H + 12.0 * (i as f64 + 1.0),
            escape(id)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Advisor inputs from trade-off rows; rows without an F1 are dropped.
pub fn stage_results(rows: &[TradeoffRow]) -> Vec<StageResult> {
    rows.iter()
        .filter_map(|r| {
            Some(StageResult {
                model: r.model.clone(),
                approach: r.approach,
                style: r.style,
                macro_f1: r.mean_f1?,
                energy_kwh: r.energy_kwh,
                avg_inference_s: r.avg_inference_s,
                parameter_count: r.parameter_count,
            })
        })
        .collect()
}
