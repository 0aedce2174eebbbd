use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::OrchestratorError;
use crate::codebook::{DataSplit, Partition};
use crate::efficiency::EnergyReading;
use crate::gateway::{HealthReport, QueryFailure, QueryRecord, SamplingParams};
use crate::prompt::{LearningApproach, PromptStyle};

pub const RUN_FORMAT: &str = "annobench-run/1";
pub const HEADER_FILE: &str = "run.json";
pub const LOG_FILE: &str = "log.ndjson";
pub const STATE_FILE: &str = "state.json";
pub const INPUTS_DIR: &str = "inputs";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub codebook_hash: String,
    pub truth_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigurationRecord {
    pub id: String,
    pub task: String,
    pub model: String,
    pub style: PromptStyle,
    pub approach: LearningApproach,
    pub approach_label: String,
    pub repeat: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSampling {
    pub model: String,
    pub params: SamplingParams,
}

/// A prompt as sent, with the unit text replaced by `{text}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub task: String,
    pub item_id: String,
    pub style: String,
    pub approach: String,
    pub n_examples: usize,
    pub template: String,
}

/// Everything fixed at run creation, written once to `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub format: String,
    pub run_id: String,
    pub grid_hash: String,
    pub created_at: String,
    pub config: RunConfig,
    pub tasks: Vec<TaskRecord>,
    pub configurations: Vec<ConfigurationRecord>,
    pub total_cells: usize,
    pub sampling: Vec<ModelSampling>,
    pub templates: Vec<TemplateRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub splits: BTreeMap<String, DataSplit>,
    /// `None` when no split is configured and every unit is evaluated.
    pub evaluation_partition: Option<Partition>,
    pub energy_provider: String,
}

impl RunHeader {
    pub fn load(run_dir: &Path) -> Result<Self, OrchestratorError> {
        let path = run_dir.join(HEADER_FILE);
        if !path.exists() {
            return Err(OrchestratorError::NotARun(run_dir.to_path_buf()));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let header: RunHeader = serde_json::from_str(&text).map_err(|e| OrchestratorError::Corrupt {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        if header.format != RUN_FORMAT {
            return Err(OrchestratorError::Corrupt {
                path,
                detail: format!("unsupported run format `{}`", header.format),
            });
        }
        Ok(header)
    }

    pub fn configuration(&self, id: &str) -> Option<&ConfigurationRecord> {
        self.configurations.iter().find(|c| c.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRef {
    pub config_id: String,
    pub unit_id: String,
    pub item_id: String,
}

impl CellRef {
    pub fn key(&self) -> String {
        super::grid::cell_key(&self.config_id, &self.unit_id, &self.item_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Session {
        started_at: String,
        resumed: bool,
    },
    Health {
        report: HealthReport,
    },
    Warmup {
        model: String,
        duration_ns: u64,
    },
    Query {
        cell: CellRef,
        record: QueryRecord,
    },
    Failure {
        cell: CellRef,
        failure: QueryFailure,
    },
    /// One energy measurement window around a configuration's queries.
    Window {
        config_id: String,
        cells: usize,
        wall_ns: u64,
        energy: EnergyReading,
    },
}

fn io_err(path: &Path, e: std::io::Error) -> OrchestratorError {
    OrchestratorError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Reads the run log. A truncated final line (interrupted write) is
/// ignored; corruption anywhere else is an error.
pub fn read_log(path: &Path) -> Result<Vec<LogEntry>, OrchestratorError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| io_err(path, e))?;
    let mut entries = Vec::with_capacity(lines.len());
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => entries.push(e),
            Err(_) if i == last => {
                tracing::warn!(path = %path.display(), "ignoring truncated final log line");
            }
            Err(e) => {
                return Err(OrchestratorError::Corrupt {
                    path: path.to_path_buf(),
                    detail: format!("line {}: {e}", i + 1),
                })
            }
        }
    }
    Ok(entries)
}

/// Single-writer append handle.
pub struct LogWriter {
    file: File,
    path: PathBuf,
}

impl LogWriter {
    /// Opens for appending, first cutting any partial final line.
    pub fn open(path: &Path) -> Result<Self, OrchestratorError> {
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        let mut content = Vec::new();
        file.read_to_end(&mut content).map_err(|e| io_err(path, e))?;
        if !content.is_empty() && content.last() != Some(&b'\n') {
            let keep = content.iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
            file.set_len(keep as u64).map_err(|e| io_err(path, e))?;
            file.seek(SeekFrom::End(0)).map_err(|e| io_err(path, e))?;
        }
        Ok(LogWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<(), OrchestratorError> {
        let mut line = serde_json::to_string(entry).expect("log entry serializes");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| io_err(&self.path, e))
    }
}

/// Small derived summary next to the log; the log stays authoritative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateIndex {
    pub run_id: String,
    pub grid_hash: String,
    pub total_cells: usize,
    pub done: usize,
    pub failed: usize,
    pub pending: usize,
}

impl StateIndex {
    pub fn write(&self, run_dir: &Path) -> Result<(), OrchestratorError> {
        let path = run_dir.join(STATE_FILE);
        let tmp = run_dir.join(format!("{STATE_FILE}.tmp"));
        let text = serde_json::to_string_pretty(self).expect("state serializes");
        std::fs::write(&tmp, text + "\n").map_err(|e| io_err(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
    }
}

/// Latest outcome per cell key: a success always wins over failures.
pub fn cell_outcomes(entries: &[LogEntry]) -> BTreeMap<String, &LogEntry> {
    let mut out: BTreeMap<String, &LogEntry> = BTreeMap::new();
    for e in entries {
        match e {
            LogEntry::Query { cell, .. } => {
                out.insert(cell.key(), e);
            }
            LogEntry::Failure { cell, .. } => {
                let key = cell.key();
                if !matches!(out.get(&key), Some(LogEntry::Query { .. })) {
                    out.insert(key, e);
                }
            }
            _ => {}
        }
    }
    out
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<(), OrchestratorError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, OrchestratorError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| OrchestratorError::Corrupt {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}
