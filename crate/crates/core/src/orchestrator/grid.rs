use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{RunConfig, SplitConfig, TaskSpec};
use super::OrchestratorError;
use crate::codebook::{
    applicable_units, load_codebook, make_splits, Codebook, DataSplit, GroundTruthDataset, Partition, Unit,
};
use crate::gateway::{ModelConfig, SamplingParams};
use crate::prompt::{
    render_prompt, ApproachKind, LearningApproach, PromptError, PromptStyle, StyleKind, TEMPLATE_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RulePreset {
    /// Persona and chain-of-thought cells are only run with few-shot
    /// examples, so style effects are not confounded with examples.
    StyleVariantsImplyFewShot,
}

/// Empty lists match anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Selector {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub styles: Vec<StyleKind>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub approaches: Vec<ApproachKind>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<String>,
}

impl Selector {
    fn matches(&self, task: &str, model: &str, style: StyleKind, approach: ApproachKind) -> bool {
        (self.styles.is_empty() || self.styles.contains(&style))
            && (self.approaches.is_empty() || self.approaches.contains(&approach))
            && (self.models.is_empty() || self.models.iter().any(|m| m == model))
            && (self.tasks.is_empty() || self.tasks.iter().any(|t| t == task))
    }
}

/// A combination matching `when` is kept only if it also matches `then`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CrossingRule {
    Preset(RulePreset),
    Constraint { when: Selector, then: Selector },
}

impl CrossingRule {
    fn as_constraint(&self) -> (Selector, Selector) {
        match self {
            CrossingRule::Preset(RulePreset::StyleVariantsImplyFewShot) => (
                Selector {
                    styles: vec![StyleKind::Persona, StyleKind::Cot],
                    ..Default::default()
                },
                Selector {
                    approaches: vec![ApproachKind::FewShot],
                    ..Default::default()
                },
            ),
            CrossingRule::Constraint { when, then } => (when.clone(), then.clone()),
        }
    }

    pub fn allows(&self, task: &str, model: &str, style: StyleKind, approach: ApproachKind) -> bool {
        let (when, then) = self.as_constraint();
        !when.matches(task, model, style, approach) || then.matches(task, model, style, approach)
    }
}

/// Table label of a learning approach; a capped few-shot shows its cap.
pub fn approach_label(a: &LearningApproach) -> String {
    match a {
        LearningApproach::FewShot { max_examples: Some(n) } => format!("Few-Shot({n})"),
        other => other.label().to_owned(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTask {
    pub spec: TaskSpec,
    pub codebook: Codebook,
    pub truth: GroundTruthDataset,
    pub split: Option<DataSplit>,
}

impl LoadedTask {
    /// Units queried and evaluated, in dataset order.
    pub fn evaluation_units(&self, partition: Partition) -> Vec<String> {
        self.truth
            .units
            .iter()
            .filter(|u| self.split.as_ref().is_none_or(|s| s.partition_of(&u.id) == Some(partition)))
            .map(|u| u.id.clone())
            .collect()
    }
}

/// A validated grid with codebooks and ground truth loaded.
#[derive(Debug, Clone)]
pub struct ExperimentGrid {
    pub tasks: Vec<LoadedTask>,
    pub models: Vec<ModelConfig>,
    pub sampling: Vec<SamplingParams>,
    pub styles: Vec<PromptStyle>,
    pub approaches: Vec<LearningApproach>,
    pub crossing_rules: Vec<CrossingRule>,
    pub evaluation_partition: Partition,
    pub splits: Option<SplitConfig>,
    pub repeats: u32,
}

fn ensure_unique<'a>(axis: &str, labels: impl Iterator<Item = &'a str>) -> Result<(), OrchestratorError> {
    let mut seen = HashSet::new();
    for l in labels {
        if !seen.insert(l) {
            return Err(OrchestratorError::Config(format!("duplicate {axis} `{l}`")));
        }
    }
    Ok(())
}

impl ExperimentGrid {
    pub fn load(config: &RunConfig) -> Result<Self, OrchestratorError> {
        let mut tasks = Vec::new();
        for spec in &config.tasks {
            let codebook = load_codebook(&spec.codebook)?;
            let truth = GroundTruthDataset::load(&spec.id, &codebook, &spec.ground_truth)?;
            let split = config
                .splits
                .map(|s| make_splits(&truth, s.ratios, s.seed))
                .transpose()?;
            if let Some(split) = &split {
                for w in &split.warnings {
                    tracing::warn!(task = %spec.id, "{w}");
                }
            }
            tasks.push(LoadedTask {
                spec: spec.clone(),
                codebook,
                truth,
                split,
            });
        }
        Self::from_parts(config, tasks)
    }

    pub fn from_parts(config: &RunConfig, tasks: Vec<LoadedTask>) -> Result<Self, OrchestratorError> {
        if tasks.is_empty() || config.models.is_empty() || config.styles.is_empty() || config.approaches.is_empty() {
            return Err(OrchestratorError::Config(
                "tasks, models, styles and approaches must all be non-empty".into(),
            ));
        }
        if config.repeats == 0 {
            return Err(OrchestratorError::Config("repeats must be at least 1".into()));
        }
        ensure_unique("task", tasks.iter().map(|t| t.spec.id.as_str()))?;
        ensure_unique("model", config.models.iter().map(|m| m.name.as_str()))?;
        ensure_unique("style", config.styles.iter().map(|s| s.label()))?;
        let approach_labels: Vec<String> = config.approaches.iter().map(approach_label).collect();
        ensure_unique("approach", approach_labels.iter().map(String::as_str))?;
        for t in &tasks {
            if t.spec.id.contains(['/', '|']) {
                return Err(OrchestratorError::Config(format!("task id `{}` must not contain `/` or `|`", t.spec.id)));
            }
        }
        for m in &config.models {
            if m.name.contains(['/', '|']) {
                return Err(OrchestratorError::Config(format!("model name `{}` must not contain `/` or `|`", m.name)));
            }
        }
        let sampling = config
            .models
            .iter()
            .map(ModelConfig::validate)
            .collect::<Result<Vec<_>, _>>()?;
        for s in &config.styles {
            s.validate()?;
        }
        for a in &config.approaches {
            a.validate()?;
        }

        if config.evaluation_partition != Partition::Validation && config.splits.is_none() {
            return Err(OrchestratorError::Config(format!(
                "evaluation partition `{}` requires a split configuration",
                config.evaluation_partition
            )));
        }
        if config.evaluation_partition == Partition::Test {
            if !config.allow_test_partition {
                return Err(OrchestratorError::Discipline(
                    "evaluating on the test partition requires the explicit test flag".into(),
                ));
            }
            if config.styles.len() > 1 || config.approaches.len() > 1 {
                return Err(OrchestratorError::Discipline(
                    "the test partition is for final reporting: select a single prompt style and learning approach on validation first".into(),
                ));
            }
        }
        if config.splits.is_some() {
            for t in &tasks {
                check_example_leakage(t)?;
            }
        }

        Ok(ExperimentGrid {
            tasks,
            models: config.models.clone(),
            sampling,
            styles: config.styles.clone(),
            approaches: config.approaches.clone(),
            crossing_rules: config.crossing_rules.clone(),
            evaluation_partition: config.evaluation_partition,
            splits: config.splits,
            repeats: config.repeats,
        })
    }

    /// Identity of everything that determines which queries are issued and
    /// how. Endpoint URLs, timeouts and evaluation policy are excluded.
    pub fn grid_hash(&self) -> String {
        let models: Vec<_> = self
            .models
            .iter()
            .map(|m| {
                json!({
                    "name": m.name, "version_tag": m.version_tag, "parameter_count": m.parameter_count,
                    "quantisation": m.quantisation, "quantisation_method": m.quantisation_method,
                    "sampling": m.sampling, "protocol": m.endpoint.protocol,
                    "reasoning_model": m.reasoning_model, "digest": m.digest,
                })
            })
            .collect();
        let tasks: Vec<_> = self
            .tasks
            .iter()
            .map(|t| json!({"id": t.spec.id, "codebook": t.codebook.content_hash(), "truth": t.truth.content_hash()}))
            .collect();
        let identity = json!({
            "template_version": TEMPLATE_VERSION,
            "tasks": tasks,
            "models": models,
            "styles": self.styles,
            "approaches": self.approaches,
            "crossing_rules": self.crossing_rules,
            "evaluation_partition": self.evaluation_partition,
            "splits": self.splits,
            "repeats": self.repeats,
        });
        crate::content_hash(identity.to_string().as_bytes())
    }
}

/// Rejects codebook examples whose text is a unit outside the training
/// partition.
fn check_example_leakage(task: &LoadedTask) -> Result<(), OrchestratorError> {
    let Some(split) = &task.split else {
        return Ok(());
    };
    let held_out: BTreeSet<&str> = task
        .truth
        .units
        .iter()
        .filter(|u| split.partition_of(&u.id) != Some(Partition::Train))
        .map(|u| u.text.trim())
        .collect();
    for item in task.codebook.items() {
        for ex in &item.examples {
            if held_out.contains(ex.text.trim()) {
                return Err(OrchestratorError::Discipline(format!(
                    "task `{}`: example of item `{}` is a held-out unit; few-shot examples must come from the training partition",
                    task.spec.id, item.id
                )));
            }
        }
    }
    Ok(())
}

/// One (task, model, style, approach, repeat) combination.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Configuration {
    pub id: String,
    pub task: usize,
    pub model: usize,
    pub style: usize,
    pub approach: usize,
    pub repeat: u32,
}

/// One query: a configuration applied to one unit and item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCell {
    pub config: usize,
    pub unit_id: String,
    pub item_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expansion {
    pub configurations: Vec<Configuration>,
    pub cells: Vec<RunCell>,
}

impl Expansion {
    pub fn cell_key(&self, cell: &RunCell) -> String {
        cell_key(&self.configurations[cell.config].id, &cell.unit_id, &cell.item_id)
    }
}

pub fn cell_key(config_id: &str, unit_id: &str, item_id: &str) -> String {
    format!("{config_id}|{unit_id}|{item_id}")
}

/// Expands the factorial grid into configurations and cells.
///
/// Order: tasks, models, styles, approaches, repeats, then units in dataset
/// order and items in codebook order. Items are queried only on units they
/// apply to under the resolved ground truth.
pub fn expand_grid(grid: &ExperimentGrid) -> Result<Expansion, OrchestratorError> {
    let mut configurations = Vec::new();
    for (ti, task) in grid.tasks.iter().enumerate() {
        for (mi, model) in grid.models.iter().enumerate() {
            for (si, style) in grid.styles.iter().enumerate() {
                for (ai, approach) in grid.approaches.iter().enumerate() {
                    let allowed = grid
                        .crossing_rules
                        .iter()
                        .all(|r| r.allows(&task.spec.id, &model.name, style.kind(), approach.kind()));
                    if !allowed {
                        continue;
                    }
                    for repeat in 1..=grid.repeats {
                        let mut id = format!(
                            "{}/{}/{}/{}",
                            task.spec.id,
                            model.name,
                            style.label(),
                            approach_label(approach)
                        );
                        if grid.repeats > 1 {
                            id.push_str(&format!("/r{repeat}"));
                        }
                        configurations.push(Configuration {
                            id,
                            task: ti,
                            model: mi,
                            style: si,
                            approach: ai,
                            repeat,
                        });
                    }
                }
            }
        }
    }
    if configurations.is_empty() {
        return Err(OrchestratorError::Unsatisfiable);
    }
    preflight_render(grid, &configurations)?;

    let mut per_task: Vec<Vec<(String, String)>> = Vec::new();
    for task in &grid.tasks {
        let units = task.evaluation_units(grid.evaluation_partition);
        let mut applicable: Vec<(String, HashSet<String>)> = Vec::new();
        for item in task.codebook.items() {
            let set: HashSet<String> = applicable_units(item, &task.truth)?.into_iter().collect();
            applicable.push((item.id.clone(), set));
        }
        let mut pairs = Vec::new();
        for u in &units {
            for (item, set) in &applicable {
                if set.contains(u) {
                    pairs.push((u.clone(), item.clone()));
                }
            }
        }
        per_task.push(pairs);
    }
    let cells = configurations
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| {
            per_task[c.task].iter().map(move |(u, i)| RunCell {
                config: ci,
                unit_id: u.clone(),
                item_id: i.clone(),
            })
        })
        .collect();
    Ok(Expansion { configurations, cells })
}

/// Renders every (configuration, item) once so template errors surface
/// before any query is sent.
fn preflight_render(grid: &ExperimentGrid, configs: &[Configuration]) -> Result<(), OrchestratorError> {
    let probe = Unit {
        id: "_".into(),
        text: "_".into(),
    };
    let mut checked = HashSet::new();
    for c in configs {
        if !checked.insert((c.task, c.style, c.approach)) {
            continue;
        }
        let task = &grid.tasks[c.task];
        for (section, item) in task.codebook.items_with_sections() {
            render_prompt(section, item, &probe, &grid.styles[c.style], &grid.approaches[c.approach])
                .map_err(|e: PromptError| OrchestratorError::Prompt {
                    task: task.spec.id.clone(),
                    source: e,
                })?;
        }
    }
    Ok(())
}
