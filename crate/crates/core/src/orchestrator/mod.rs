//! Grid expansion, resumable execution and staged workflow guidance.

mod advisor;
mod config;
mod evaluate;
mod grid;
mod log;
mod run;

use std::path::PathBuf;

pub use advisor::{
    workflow_advisor, AdvisorInput, AdvisorReport, EfficiencyConstraints, Recommendation, StageResult, StepStatus,
    STEP_ACTIONS,
};
pub use config::{
    EnergyConfig, HardwareSpec, Policies, RunConfig, SplitConfig, TaskSpec, ENDPOINT_ENV, ENDPOINT_ENV_PREFIX,
};
pub use evaluate::{evaluate_artifacts, evaluate_run, ConfigEvaluation, EvaluationOptions, RunArtifacts, RunEvaluation};
pub use grid::{
    approach_label, cell_key, expand_grid, Configuration, CrossingRule, Expansion, ExperimentGrid, LoadedTask,
    RulePreset, RunCell, Selector,
};
pub use log::{
    cell_outcomes, read_log, CellRef, ConfigurationRecord, LogEntry, LogWriter, ModelSampling, RunHeader,
    StateIndex, TaskRecord, TemplateRecord, HEADER_FILE, INPUTS_DIR, LOG_FILE, RUN_FORMAT, STATE_FILE,
};
pub use run::{resume_run, run_id_for, start_run, RunOptions, RunSummary};

use crate::codebook::CodebookError;
use crate::gateway::GatewayError;
use crate::metrics::MetricsError;
use crate::prompt::PromptError;

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Discipline(String),
    #[error("crossing rules leave no configuration to run")]
    Unsatisfiable,
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] PromptError),
    #[error("task `{task}`: {source}")]
    Prompt { task: String, source: PromptError },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: corrupt run data: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("{0} already holds a run; use resume")]
    RunExists(PathBuf),
    #[error("{0} does not hold a run")]
    NotARun(PathBuf),
    #[error("codebook of task `{task}` changed since the run started (hash {expected} → {found})")]
    CodebookChanged { task: String, expected: String, found: String },
    #[error("ground truth of task `{task}` changed since the run started (hash {expected} → {found})")]
    GroundTruthChanged { task: String, expected: String, found: String },
    #[error("grid hash mismatch: run has {expected}, config gives {found}")]
    GridMismatch { expected: String, found: String },
    #[error("missing prerequisite stage: {0}")]
    MissingStage(String),
}
