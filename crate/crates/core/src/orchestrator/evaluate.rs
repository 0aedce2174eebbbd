use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::log::{cell_outcomes, read_json, read_log, ConfigurationRecord, LogEntry, RunHeader, INPUTS_DIR, LOG_FILE};
use super::OrchestratorError;
use crate::codebook::{Codebook, GroundTruthDataset, Partition};
use crate::efficiency::{finalize_efficiency, EfficiencyAccumulator, EfficiencyReport, EnergyReading};
use crate::metrics::{
    evaluate_item, group_by_annotation_type, model_path_units, EvaluationScope, MetricReport, MetricsError,
    NonCompliancePolicy,
};
use crate::parser::{extract_response, NonCompliance, ParsedAnnotation};

#[derive(Debug, Clone, Copy, Default)]
pub struct EvaluationOptions {
    /// Overrides the policy recorded in the run config.
    pub policy: Option<NonCompliancePolicy>,
    /// Also compute metrics for nested items conditioned on the model's own
    /// parent answers.
    pub model_path: bool,
    /// Leave out configurations with unqueried cells instead of failing.
    pub skip_incomplete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEvaluation {
    pub config: ConfigurationRecord,
    pub items: Vec<MetricReport>,
    /// Item reports averaged per annotation type.
    pub groups: Vec<MetricReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub model_path: Vec<MetricReport>,
    pub efficiency: EfficiencyReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub run_id: String,
    pub grid_hash: String,
    pub policy: NonCompliancePolicy,
    pub evaluation_partition: Option<Partition>,
    pub repeats: u32,
    pub configs: Vec<ConfigEvaluation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
}

/// A run directory read back: header, input snapshots and log.
pub struct RunArtifacts {
    pub header: RunHeader,
    pub codebooks: BTreeMap<String, Codebook>,
    pub truths: BTreeMap<String, GroundTruthDataset>,
    pub entries: Vec<LogEntry>,
}

impl RunArtifacts {
    pub fn load(run_dir: &Path) -> Result<Self, OrchestratorError> {
        let header = RunHeader::load(run_dir)?;
        let inputs = run_dir.join(INPUTS_DIR);
        let mut codebooks = BTreeMap::new();
        let mut truths = BTreeMap::new();
        for t in &header.tasks {
            let cb: Codebook = read_json(&inputs.join(format!("{}.codebook.json", t.id)))?;
            let truth: GroundTruthDataset = read_json(&inputs.join(format!("{}.truth.json", t.id)))?;
            codebooks.insert(t.id.clone(), cb);
            truths.insert(t.id.clone(), truth);
        }
        let entries = read_log(&run_dir.join(LOG_FILE))?;
        Ok(RunArtifacts {
            header,
            codebooks,
            truths,
            entries,
        })
    }

    fn evaluation_units(&self, task: &str) -> Option<BTreeSet<String>> {
        let partition = self.header.evaluation_partition?;
        let split = self.header.splits.get(task)?;
        Some(split.units_in(partition).map(str::to_owned).collect())
    }
}

/// Scores every configuration of a run from its log alone.
pub fn evaluate_run(run_dir: &Path, opts: &EvaluationOptions) -> Result<RunEvaluation, OrchestratorError> {
    let art = RunArtifacts::load(run_dir)?;
    evaluate_artifacts(&art, opts)
}

pub fn evaluate_artifacts(art: &RunArtifacts, opts: &EvaluationOptions) -> Result<RunEvaluation, OrchestratorError> {
    let header = &art.header;
    let policy = opts.policy.unwrap_or(header.config.policies.non_compliance);
    let outcomes = cell_outcomes(&art.entries);

    let mut windows: BTreeMap<&str, Vec<EnergyReading>> = BTreeMap::new();
    for e in &art.entries {
        if let LogEntry::Window { config_id, energy, .. } = e {
            windows.entry(config_id.as_str()).or_default().push(energy.clone());
        }
    }

    let mut configs = Vec::new();
    let mut skipped = Vec::new();
    'configs: for conf in &header.configurations {
        let codebook = &art.codebooks[&conf.task];
        let truth = &art.truths[&conf.task];
        let scope_units = art.evaluation_units(&conf.task);

        let mut parsed: BTreeMap<String, BTreeMap<String, ParsedAnnotation>> = BTreeMap::new();
        let mut acc = EfficiencyAccumulator::default();
        for item in codebook.items() {
            let per_item = parsed.entry(item.id.clone()).or_default();
            for unit in &truth.units {
                let key = super::grid::cell_key(&conf.id, &unit.id, &item.id);
                match outcomes.get(&key) {
                    Some(LogEntry::Query { record, .. }) => {
                        acc.record(record.duration_ns, record.output_chars as u64);
                        per_item.insert(unit.id.clone(), extract_response(&record.raw_output, item));
                    }
                    Some(LogEntry::Failure { .. }) => {
                        per_item.insert(unit.id.clone(), ParsedAnnotation::NonCompliant(NonCompliance::Transport));
                    }
                    _ => {}
                }
            }
        }

        let scope = EvaluationScope {
            units: scope_units.as_ref(),
            policy,
        };
        let mut items = Vec::new();
        for item in codebook.items() {
            match evaluate_item(item, truth, &parsed[&item.id], &scope) {
                Ok(r) => items.push(r),
                Err(MetricsError::CoverageGap { item, missing }) if opts.skip_incomplete => {
                    skipped.push(format!(
                        "{}: item `{item}` has {} unqueried unit(s)",
                        conf.id,
                        missing.len()
                    ));
                    continue 'configs;
                }
                Err(e) => return Err(e.into()),
            }
        }
        let groups = group_by_annotation_type(&items)?;

        let mut model_path = Vec::new();
        if opts.model_path {
            for item in codebook.items() {
                let Some(dep) = &item.dependency else { continue };
                let mut units = model_path_units(item, truth, &parsed[&dep.parent_item_id])?;
                if let Some(s) = &scope_units {
                    units.retain(|u| s.contains(u));
                }
                let path_scope = EvaluationScope {
                    units: Some(&units),
                    policy,
                };
                let mut r = evaluate_item(item, truth, &parsed[&item.id], &path_scope)?;
                r.flags.push("conditioned on model-predicted parent".into());
                model_path.push(r);
            }
        }

        let energy = EnergyReading::combine(windows.get(conf.id.as_str()).map_or(&[][..], Vec::as_slice));
        configs.push(ConfigEvaluation {
            config: conf.clone(),
            items,
            groups,
            model_path,
            efficiency: finalize_efficiency(&acc, &energy),
        });
    }

    Ok(RunEvaluation {
        run_id: header.run_id.clone(),
        grid_hash: header.grid_hash.clone(),
        policy,
        evaluation_partition: header.evaluation_partition,
        repeats: header.config.repeats,
        configs,
        skipped,
    })
}
