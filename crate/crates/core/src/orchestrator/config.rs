use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grid::CrossingRule;
use super::OrchestratorError;
use crate::codebook::{Partition, SplitRatios};
use crate::efficiency::{EnergyProvider, ExternalMeter, MeterSource, MockProvider, NullProvider};
use crate::gateway::{ModelConfig, RetryPolicy};
use crate::metrics::NonCompliancePolicy;
use crate::prompt::{LearningApproach, PromptStyle};

/// Overrides every model's endpoint URL.
pub const ENDPOINT_ENV: &str = "ANNOBENCH_ENDPOINT";
/// Prefix for per-model overrides; the model name is upper-cased with
/// non-alphanumerics mapped to `_` (`Qwen 3` → `ANNOBENCH_ENDPOINT_QWEN_3`).
pub const ENDPOINT_ENV_PREFIX: &str = "ANNOBENCH_ENDPOINT_";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub codebook: PathBuf,
    pub ground_truth: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub ratios: SplitRatios,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HardwareSpec {
    #[serde(default)]
    pub accelerator: String,
    #[serde(default)]
    pub memory: String,
    #[serde(default)]
    pub inference_framework: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Policies {
    pub non_compliance: NonCompliancePolicy,
    pub retry: RetryPolicy,
    pub timeout_s: u64,
    pub concurrency_per_endpoint: usize,
    pub workers: usize,
}

impl Default for Policies {
    fn default() -> Self {
        Policies {
            non_compliance: NonCompliancePolicy::Exclude,
            retry: RetryPolicy::default(),
            timeout_s: crate::gateway::DEFAULT_TIMEOUT.as_secs(),
            concurrency_per_endpoint: 1,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "snake_case")]
pub enum EnergyConfig {
    #[default]
    Null,
    Mock {
        step_kwh: f64,
    },
    External {
        source: MeterSource,
    },
}

impl EnergyConfig {
    pub fn provider(&self) -> Box<dyn EnergyProvider> {
        match self {
            EnergyConfig::Null => Box::new(NullProvider),
            EnergyConfig::Mock { step_kwh } => Box::new(MockProvider::new(*step_kwh)),
            EnergyConfig::External { source } => Box::new(ExternalMeter::new(source.clone())),
        }
    }
}

fn default_partition() -> Partition {
    Partition::Validation
}

fn default_repeats() -> u32 {
    1
}

/// The single structured file defining a benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub tasks: Vec<TaskSpec>,
    pub models: Vec<ModelConfig>,
    pub styles: Vec<PromptStyle>,
    pub approaches: Vec<LearningApproach>,
    #[serde(default)]
    pub crossing_rules: Vec<CrossingRule>,
    #[serde(default = "default_partition")]
    pub evaluation_partition: Partition,
    /// Must be set to evaluate on the test partition.
    #[serde(default)]
    pub allow_test_partition: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<SplitConfig>,
    #[serde(default = "default_repeats")]
    pub repeats: u32,
    #[serde(default)]
    pub policies: Policies,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardware: Option<HardwareSpec>,
    #[serde(default)]
    pub energy: EnergyConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, OrchestratorError> {
        serde_json::from_str(text).map_err(|e| OrchestratorError::Config(e.to_string()))
    }

    /// Loads a config file; task paths are resolved against its directory
    /// and endpoint overrides are applied from the environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, OrchestratorError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.apply_endpoint_overrides(|k| std::env::var(k).ok());
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for t in &mut self.tasks {
            if t.codebook.is_relative() {
                t.codebook = base.join(&t.codebook);
            }
            if t.ground_truth.is_relative() {
                t.ground_truth = base.join(&t.ground_truth);
            }
        }
    }

    pub fn apply_endpoint_overrides(&mut self, var: impl Fn(&str) -> Option<String>) {
        let global = var(ENDPOINT_ENV);
        for m in &mut self.models {
            let key = format!("{ENDPOINT_ENV_PREFIX}{}", env_suffix(&m.name));
            if let Some(url) = var(&key).or_else(|| global.clone()) {
                m.endpoint.url = url;
            }
        }
    }
}

fn env_suffix(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect()
}
