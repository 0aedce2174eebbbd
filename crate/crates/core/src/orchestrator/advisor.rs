//! Staged model-selection guidance computed from completed results.
//! Advisory only: nothing here triggers a run.

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::prompt::{ApproachKind, StyleKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub model: String,
    pub approach: ApproachKind,
    pub style: StyleKind,
    pub macro_f1: f64,
    pub energy_kwh: Option<f64>,
    pub avg_inference_s: Option<f64>,
    pub parameter_count: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyConstraints {
    pub max_energy_kwh: Option<f64>,
    pub max_avg_inference_s: Option<f64>,
    pub max_parameter_count: Option<u64>,
}

impl EfficiencyConstraints {
    fn is_set(&self) -> bool {
        self.max_energy_kwh.is_some() || self.max_avg_inference_s.is_some() || self.max_parameter_count.is_some()
    }

    /// Reasons a result breaks the constraints; unknown values pass.
    fn violations(&self, r: &StageResult) -> Vec<String> {
        let mut v = Vec::new();
        if let (Some(max), Some(e)) = (self.max_energy_kwh, r.energy_kwh) {
            if e > max {
                v.push(format!("energy {e:.3} kWh > {max:.3}"));
            }
        }
        if let (Some(max), Some(t)) = (self.max_avg_inference_s, r.avg_inference_s) {
            if t > max {
                v.push(format!("avg inference {t:.3} s > {max:.3}"));
            }
        }
        if let (Some(max), Some(p)) = (self.max_parameter_count, r.parameter_count) {
            if p > max {
                v.push(format!("{p} parameters > {max}"));
            }
        }
        v
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvisorInput {
    #[serde(default)]
    pub constraints: EfficiencyConstraints,
    /// Macro-F1 at which performance counts as satisfactory.
    #[serde(default)]
    pub satisfactory_f1: Option<f64>,
    pub results: Vec<StageResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Done,
    Next,
    Pending,
    Skippable,
    Blocked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub step: u8,
    pub action: String,
    pub status: StepStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisorReport {
    pub steps: Vec<Recommendation>,
    pub selected_model: Option<String>,
    pub recommended_approach: Option<ApproachKind>,
}

pub const STEP_ACTIONS: [&str; 5] = [
    "Define efficiency constraints first.",
    "Run zero-shot standard prompts on a validation sample.",
    "Select the best-performing model on your task.",
    "Test few-shot on your selected model.",
    "Only test prompt styles if performance remains unsatisfactory.",
];

fn step(n: u8, status: StepStatus, detail: impl Into<String>) -> Recommendation {
    Recommendation {
        step: n,
        action: STEP_ACTIONS[usize::from(n) - 1].to_owned(),
        status,
        detail: detail.into(),
    }
}

fn is_stage2(r: &StageResult) -> bool {
    r.approach == ApproachKind::ZeroShot && r.style == StyleKind::Standard
}

fn is_stage4(r: &StageResult) -> bool {
    r.approach == ApproachKind::FewShot && r.style == StyleKind::Standard
}

fn is_stage5(r: &StageResult) -> bool {
    r.style != StyleKind::Standard
}

pub fn workflow_advisor(input: &AdvisorInput) -> Result<AdvisorReport, OrchestratorError> {
    let results = &input.results;
    let stage2: Vec<&StageResult> = results.iter().filter(|r| is_stage2(r)).collect();
    if stage2.is_empty() && !results.is_empty() {
        return Err(OrchestratorError::MissingStage(
            "zero-shot standard results are required before few-shot or prompt-style results can be assessed".into(),
        ));
    }

    let mut steps = Vec::new();
    let mut excluded = Vec::new();
    for r in &stage2 {
        let v = input.constraints.violations(r);
        if !v.is_empty() {
            excluded.push((r.model.as_str(), v.join(", ")));
        }
    }
    steps.push(if input.constraints.is_set() {
        let detail = if excluded.is_empty() {
            "all evaluated models satisfy the constraints".to_owned()
        } else {
            excluded
                .iter()
                .map(|(m, why)| format!("{m} excluded ({why})"))
                .collect::<Vec<_>>()
                .join("; ")
        };
        step(1, StepStatus::Done, detail)
    } else {
        step(1, StepStatus::Next, "no energy, time or size limits set; every model family is admissible")
    });

    if stage2.is_empty() {
        steps.push(step(2, StepStatus::Next, "no zero-shot standard results yet"));
        for n in 3..=5 {
            steps.push(step(n, StepStatus::Pending, "awaiting zero-shot results"));
        }
        return Ok(AdvisorReport {
            steps,
            selected_model: None,
            recommended_approach: None,
        });
    }
    let listing = stage2
        .iter()
        .map(|r| format!("{} {:.3}", r.model, r.macro_f1))
        .collect::<Vec<_>>()
        .join(", ");
    steps.push(step(2, StepStatus::Done, format!("zero-shot macro-F1: {listing}")));

    let admissible: Vec<&&StageResult> = stage2
        .iter()
        .filter(|r| !excluded.iter().any(|(m, _)| *m == r.model))
        .collect();
    let Some(best) = admissible
        .iter()
        .copied()
        .max_by(|a, b| a.macro_f1.total_cmp(&b.macro_f1).then_with(|| b.model.cmp(&a.model)))
    else {
        steps.push(step(3, StepStatus::Blocked, "no model satisfies the efficiency constraints"));
        steps.push(step(4, StepStatus::Pending, "no model selected"));
        steps.push(step(5, StepStatus::Pending, "no model selected"));
        return Ok(AdvisorReport {
            steps,
            selected_model: None,
            recommended_approach: None,
        });
    };
    let runners_up = admissible
        .iter()
        .filter(|r| r.model != best.model)
        .map(|r| format!("{} {:.3}", r.model, r.macro_f1))
        .collect::<Vec<_>>();
    let detail = if runners_up.is_empty() {
        format!("{} (macro-F1 {:.3})", best.model, best.macro_f1)
    } else {
        format!("{} (macro-F1 {:.3}) over {}", best.model, best.macro_f1, runners_up.join(", "))
    };
    steps.push(step(3, StepStatus::Done, detail));

    let few = results.iter().find(|r| r.model == best.model && is_stage4(r));
    let styles: Vec<&StageResult> = results
        .iter()
        .filter(|r| r.model == best.model && is_stage5(r))
        .collect();
    if few.is_none() && !styles.is_empty() {
        return Err(OrchestratorError::MissingStage(format!(
            "prompt-style results for {} exist without few-shot standard results",
            best.model
        )));
    }
    let (approach, best_f1) = match few {
        None => {
            steps.push(step(4, StepStatus::Next, format!("no few-shot results for {} yet", best.model)));
            (ApproachKind::ZeroShot, best.macro_f1)
        }
        Some(f) if f.macro_f1 < best.macro_f1 => {
            steps.push(step(
                4,
                StepStatus::Done,
                format!(
                    "few-shot macro-F1 {:.3} is below zero-shot {:.3}: retain zero-shot",
                    f.macro_f1, best.macro_f1
                ),
            ));
            (ApproachKind::ZeroShot, best.macro_f1)
        }
        Some(f) => {
            steps.push(step(
                4,
                StepStatus::Done,
                format!(
                    "few-shot macro-F1 {:.3} vs zero-shot {:.3}: adopt few-shot",
                    f.macro_f1, best.macro_f1
                ),
            ));
            (ApproachKind::FewShot, f.macro_f1)
        }
    };

    let satisfied = input.satisfactory_f1.filter(|t| best_f1 >= *t);
    steps.push(if let Some(t) = satisfied {
        step(
            5,
            StepStatus::Skippable,
            format!("macro-F1 {best_f1:.3} meets the {t:.3} threshold"),
        )
    } else if few.is_none() {
        step(5, StepStatus::Pending, "decide after the few-shot comparison")
    } else if !styles.is_empty() {
        let listing = styles
            .iter()
            .map(|r| format!("{:?} {:.3}", r.style, r.macro_f1).to_lowercase())
            .collect::<Vec<_>>()
            .join(", ");
        step(5, StepStatus::Done, format!("style variants: {listing} (best so far {best_f1:.3})"))
    } else {
        let why = input.satisfactory_f1.map_or_else(
            || "no satisfactory threshold set".to_owned(),
            |t| format!("macro-F1 {best_f1:.3} is below the {t:.3} threshold"),
        );
        step(5, StepStatus::Next, why)
    });

    Ok(AdvisorReport {
        steps,
        selected_model: Some(best.model.clone()),
        recommended_approach: Some(approach),
    })
}
