use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ReportError;
use crate::codebook::Partition;
use crate::content_hash;
use crate::gateway::{SamplingParams, Tagged};
use crate::metrics::NonCompliancePolicy;
use crate::orchestrator::{cell_outcomes, LogEntry, RunArtifacts, RunEvaluation, TemplateRecord};
use crate::prompt::ApproachKind;

pub const MANIFEST_SCHEMA: &str = "annobench-manifest/1";

/// JSON Schema (draft 2020-12) of the serialized manifest.
pub const MANIFEST_JSON_SCHEMA: &str = include_str!("../../schemas/manifest.schema.json");

/// The seven disclosure sections, in checklist order.
pub const SECTION_NAMES: [&str; 7] = [
    "model identity",
    "quantisation",
    "prompt text",
    "sampling hyperparameters",
    "learning approach",
    "hardware specification",
    "efficiency metrics",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIdentity {
    pub name: String,
    pub version_tag: String,
    pub parameter_count: u64,
    pub reasoning_model: bool,
    pub server_version: Option<String>,
    pub digest: Option<String>,
    /// Duration of the first warm-up request, the model load.
    pub load_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quantisation {
    pub model: String,
    pub method: String,
    pub level: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFingerprints {
    pub config_id: String,
    pub n_prompts: usize,
    /// SHA-256 over the sorted fingerprints of every prompt sent.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTextSection {
    pub templates: Vec<TemplateRecord>,
    pub fingerprints: Vec<PromptFingerprints>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSection {
    pub model: String,
    pub temperature: Tagged<f64>,
    pub top_k: Tagged<u32>,
    pub top_p: Tagged<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearningApproachSection {
    pub task: String,
    pub variant: String,
    pub kind: ApproachKind,
    /// Demonstrations embedded per item.
    pub n_examples: BTreeMap<String, usize>,
    pub selection_method: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareSection {
    pub accelerator: String,
    pub memory: String,
    pub inference_framework: String,
    pub concurrency_per_endpoint: usize,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestConfigEfficiency {
    pub config_id: String,
    pub total_inference_s: f64,
    pub avg_inference_s: Option<f64>,
    pub total_energy_kwh: Option<f64>,
    pub energy_unavailable: Option<String>,
    pub total_output_chars: u64,
    pub n_queries: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencySection {
    pub energy_provider: String,
    pub total_inference_s: f64,
    pub total_energy_kwh: Option<f64>,
    pub configurations: Vec<ManifestConfigEfficiency>,
}

/// Disclosure record for a run. A section is `None` when the run did not
/// record what it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportingManifest {
    pub schema: String,
    pub run_id: String,
    pub grid_hash: String,
    pub partial: bool,
    pub evaluation_partition: Option<Partition>,
    pub policy: NonCompliancePolicy,
    pub model_identity: Option<Vec<ModelIdentity>>,
    pub quantisation: Option<Vec<Quantisation>>,
    pub prompt_text: Option<PromptTextSection>,
    pub sampling: Option<Vec<SamplingSection>>,
    pub learning_approach: Option<Vec<LearningApproachSection>>,
    pub hardware: Option<HardwareSection>,
    pub efficiency: Option<EfficiencySection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ReportingManifest {
    /// Names of absent or empty sections, in checklist order.
    pub fn missing_sections(&self) -> Vec<String> {
        let present = [
            self.model_identity.as_ref().is_some_and(|v| !v.is_empty()),
            self.quantisation.as_ref().is_some_and(|v| !v.is_empty()),
            self.prompt_text.as_ref().is_some_and(|p| !p.templates.is_empty()),
            self.sampling.as_ref().is_some_and(|v| !v.is_empty()),
            self.learning_approach.as_ref().is_some_and(|v| !v.is_empty()),
            self.hardware.is_some(),
            self.efficiency.is_some(),
        ];
        SECTION_NAMES
            .iter()
            .zip(present)
            .filter(|(_, p)| !p)
            .map(|(n, _)| (*n).to_owned())
            .collect()
    }
}

/// Builds the manifest from values recorded in the run directory. An
/// incomplete run is refused unless `allow_partial` is set.
pub fn emit_manifest(
    art: &RunArtifacts,
    eval: &RunEvaluation,
    allow_partial: bool,
) -> Result<ReportingManifest, ReportError> {
    let header = &art.header;
    let outcomes = cell_outcomes(&art.entries);
    let pending = header.total_cells.saturating_sub(outcomes.len());
    if pending > 0 && !allow_partial {
        return Err(ReportError::Incomplete { pending });
    }

    let mut warnings: Vec<String> = eval.skipped.clone();
    let mut health = BTreeMap::new();
    let mut load_time = BTreeMap::new();
    for e in &art.entries {
        match e {
            LogEntry::Health { report } if !health.contains_key(&report.model) => {
                warnings.extend(report.warnings.iter().map(|w| format!("{}: {w}", report.model)));
                health.insert(report.model.clone(), report);
            }
            LogEntry::Warmup { model, duration_ns } => {
                load_time.entry(model.clone()).or_insert(*duration_ns as f64 / 1e9);
            }
            _ => {}
        }
    }

    let models = &header.config.models;
    let model_identity = nonempty(
        models
            .iter()
            .filter(|m| !m.name.is_empty() && !m.version_tag.is_empty() && m.parameter_count > 0)
            .map(|m| ModelIdentity {
                name: m.name.clone(),
                version_tag: m.version_tag.clone(),
                parameter_count: m.parameter_count,
                reasoning_model: m.reasoning_model,
                server_version: health.get(&m.name).map(|h| h.server_version.clone()),
                digest: health.get(&m.name).and_then(|h| h.digest.clone()),
                load_time_s: load_time.get(&m.name).copied(),
            })
            .collect(),
        models.len(),
    );

    let quantisation = nonempty(
        models
            .iter()
            .filter(|m| !m.quantisation.is_empty() && !m.quantisation_method.is_empty())
            .map(|m| Quantisation {
                model: m.name.clone(),
                method: m.quantisation_method.clone(),
                level: m.quantisation.clone(),
            })
            .collect(),
        models.len(),
    );

    let templates_ok = !header.templates.is_empty() && header.templates.iter().all(|t| !t.template.trim().is_empty());
    let prompt_text = templates_ok.then(|| PromptTextSection {
        templates: header.templates.clone(),
        fingerprints: fingerprints(art, &outcomes),
    });

    let sampling = nonempty(
        header
            .sampling
            .iter()
            .map(|s| {
                let SamplingParams {
                    temperature,
                    top_k,
                    top_p,
                } = s.params;
                SamplingSection {
                    model: s.model.clone(),
                    temperature,
                    top_k,
                    top_p,
                }
            })
            .collect(),
        models.len(),
    );

    let learning_approach = learning_approaches(art);

    let hardware = header.config.hardware.as_ref().and_then(|h| {
        let filled = [&h.accelerator, &h.memory, &h.inference_framework]
            .iter()
            .all(|s| !s.trim().is_empty());
        filled.then(|| HardwareSection {
            accelerator: h.accelerator.clone(),
            memory: h.memory.clone(),
            inference_framework: h.inference_framework.clone(),
            concurrency_per_endpoint: header.config.policies.concurrency_per_endpoint,
            workers: header.config.policies.workers,
        })
    });

    let configurations: Vec<ManifestConfigEfficiency> = eval
        .configs
        .iter()
        .map(|c| ManifestConfigEfficiency {
            config_id: c.config.id.clone(),
            total_inference_s: c.efficiency.total_inference_s,
            avg_inference_s: c.efficiency.avg_inference_s,
            total_energy_kwh: c.efficiency.total_energy_kwh,
            energy_unavailable: c.efficiency.energy_unavailable.clone(),
            total_output_chars: c.efficiency.total_output_chars,
            n_queries: c.efficiency.n_queries,
        })
        .collect();
    let energy: Option<Vec<f64>> = configurations.iter().map(|c| c.total_energy_kwh).collect();
    for c in &configurations {
        if let Some(reason) = &c.energy_unavailable {
            warnings.push(format!("{}: energy unavailable: {reason}", c.config_id));
        }
    }
    let efficiency = match energy {
        Some(e) if !configurations.is_empty() => Some(EfficiencySection {
            energy_provider: header.energy_provider.clone(),
            total_inference_s: configurations.iter().map(|c| c.total_inference_s).sum(),
            total_energy_kwh: Some(e.iter().sum()),
            configurations,
        }),
        _ => None,
    };

    Ok(ReportingManifest {
        schema: MANIFEST_SCHEMA.into(),
        run_id: header.run_id.clone(),
        grid_hash: header.grid_hash.clone(),
        partial: pending > 0 || !eval.skipped.is_empty(),
        evaluation_partition: header.evaluation_partition,
        policy: eval.policy,
        model_identity,
        quantisation,
        prompt_text,
        sampling,
        learning_approach,
        hardware,
        efficiency,
        warnings,
    })
}

/// A section covering every model, or nothing.
fn nonempty<T>(v: Vec<T>, expected: usize) -> Option<Vec<T>> {
    (!v.is_empty() && v.len() == expected).then_some(v)
}

fn fingerprints(art: &RunArtifacts, outcomes: &BTreeMap<String, &LogEntry>) -> Vec<PromptFingerprints> {
    let mut by_config: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for e in outcomes.values() {
        if let LogEntry::Query { cell, record } = e {
            by_config.entry(&cell.config_id).or_default().insert(&record.fingerprint);
        }
    }
    art.header
        .configurations
        .iter()
        .filter_map(|c| {
            let fps = by_config.get(c.id.as_str())?;
            let joined = fps.iter().copied().collect::<Vec<_>>().join("\n");
            Some(PromptFingerprints {
                config_id: c.id.clone(),
                n_prompts: fps.len(),
                digest: content_hash(joined.as_bytes()),
            })
        })
        .collect()
}

fn learning_approaches(art: &RunArtifacts) -> Option<Vec<LearningApproachSection>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for c in &art.header.configurations {
        if !seen.insert((c.task.clone(), c.approach_label.clone())) {
            continue;
        }
        let n_examples: BTreeMap<String, usize> = art
            .header
            .templates
            .iter()
            .filter(|t: &&TemplateRecord| t.task == c.task && t.approach == c.approach_label)
            .map(|t| (t.item_id.clone(), t.n_examples))
            .collect();
        if n_examples.is_empty() {
            return None;
        }
        let kind = c.approach.kind();
        let selection_method = match kind {
            ApproachKind::ZeroShot => "none".to_owned(),
            ApproachKind::FewShot if art.header.splits.contains_key(&c.task) => {
                "codebook examples in codebook order, disjoint from evaluated units".to_owned()
            }
            ApproachKind::FewShot => "codebook examples in codebook order".to_owned(),
        };
        out.push(LearningApproachSection {
            task: c.task.clone(),
            variant: c.approach_label.clone(),
            kind,
            n_examples,
            selection_method,
        });
    }
    (!out.is_empty()).then_some(out)
}

/// Fails with the names of every missing section, plus "complete run" when
/// the manifest was emitted from a partial run.
pub fn validate_manifest(m: &ReportingManifest) -> Result<(), ReportError> {
    let mut missing = m.missing_sections();
    if m.partial {
        missing.push("complete run".into());
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(ReportError::ManifestIncomplete(missing))
    }
}
