//! Inference time, output volume and energy accounting.

use std::io::BufRead;
use std::path::PathBuf;
use std::process::Command;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::gateway::QueryRecord;

const NANOS_PER_SEC: f64 = 1e9;

#[derive(Debug, thiserror::Error)]
pub enum EnergyError {
    #[error("no energy provider configured")]
    NotConfigured,
    #[error("energy meter unavailable: {0}")]
    Unavailable(String),
    #[error("energy meter went backwards ({start} kWh at start, {end} kWh at stop)")]
    NonMonotonic { start: f64, end: f64 },
}

/// A source of cumulative energy readings in kWh.
pub trait EnergyProvider: Send {
    /// Recorded in the manifest.
    fn identity(&self) -> String;

    fn sample(&mut self) -> Result<f64, EnergyError>;

    fn start(&mut self) -> Result<f64, EnergyError> {
        self.sample()
    }

    fn stop(&mut self) -> Result<f64, EnergyError> {
        self.sample()
    }
}

/// Always unavailable; efficiency reports then carry no energy figure.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullProvider;

impl EnergyProvider for NullProvider {
    fn identity(&self) -> String {
        "none".into()
    }

    fn sample(&mut self) -> Result<f64, EnergyError> {
        Err(EnergyError::NotConfigured)
    }
}

/// Deterministic meter for tests: every sample returns the current reading
/// and then advances it by `step_kwh`. The shared handle lets a test add
/// energy between samples.
#[derive(Debug, Clone)]
pub struct MockProvider {
    reading: Arc<Mutex<f64>>,
    step_kwh: f64,
}

impl MockProvider {
    pub fn new(step_kwh: f64) -> Self {
        MockProvider {
            reading: Arc::new(Mutex::new(0.0)),
            step_kwh,
        }
    }

    pub fn handle(&self) -> Arc<Mutex<f64>> {
        Arc::clone(&self.reading)
    }
}

impl EnergyProvider for MockProvider {
    fn identity(&self) -> String {
        format!("mock(step={} kWh)", self.step_kwh)
    }

    fn sample(&mut self) -> Result<f64, EnergyError> {
        let mut r = self.reading.lock().expect("mock meter lock");
        let now = *r;
        *r += self.step_kwh;
        Ok(now)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MeterSource {
    /// A file the host tool keeps appending samples to.
    File { path: PathBuf },
    /// A command printing samples on stdout.
    Command { program: String, #[serde(default)] args: Vec<String> },
}

/// One line of the meter format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeterSample {
    pub timestamp: String,
    pub cumulative_kwh: f64,
}

/// Reads newline-delimited `{timestamp, cumulative_kwh}` samples written by a
/// host power-measurement tool; the last well-formed line is the reading.
#[derive(Debug, Clone)]
pub struct ExternalMeter {
    source: MeterSource,
}

impl ExternalMeter {
    pub fn new(source: MeterSource) -> Self {
        ExternalMeter { source }
    }

    fn last_sample(reader: impl BufRead) -> Option<MeterSample> {
        reader
            .lines()
            .map_while(Result::ok)
            .filter_map(|l| serde_json::from_str::<MeterSample>(l.trim()).ok())
            .filter(|s| s.cumulative_kwh.is_finite() && s.cumulative_kwh >= 0.0)
            .last()
    }
}

impl EnergyProvider for ExternalMeter {
    fn identity(&self) -> String {
        match &self.source {
            MeterSource::File { path } => format!("external-file:{}", path.display()),
            MeterSource::Command { program, args } => {
                format!("external-command:{}", std::iter::once(program).chain(args).cloned().collect::<Vec<_>>().join(" "))
            }
        }
    }

    fn sample(&mut self) -> Result<f64, EnergyError> {
        let sample = match &self.source {
            MeterSource::File { path } => {
                let file = std::fs::File::open(path)
                    .map_err(|e| EnergyError::Unavailable(format!("{}: {e}", path.display())))?;
                Self::last_sample(std::io::BufReader::new(file))
            }
            MeterSource::Command { program, args } => {
                let out = Command::new(program)
                    .args(args)
                    .output()
                    .map_err(|e| EnergyError::Unavailable(format!("{program}: {e}")))?;
                if !out.status.success() {
                    return Err(EnergyError::Unavailable(format!("{program} exited with {}", out.status)));
                }
                Self::last_sample(out.stdout.as_slice())
            }
        };
        sample
            .map(|s| s.cumulative_kwh)
            .ok_or_else(|| EnergyError::Unavailable("no valid sample".into()))
    }
}

/// Energy attributed to one measurement window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EnergyReading {
    Measured { kwh: f64 },
    Unavailable { reason: String },
}

impl EnergyReading {
    pub fn kwh(&self) -> Option<f64> {
        match self {
            EnergyReading::Measured { kwh } => Some(*kwh),
            EnergyReading::Unavailable { .. } => None,
        }
    }

    /// Sums windows; any unavailable window makes the total unavailable.
    pub fn combine(readings: &[EnergyReading]) -> EnergyReading {
        let mut total = 0.0;
        for r in readings {
            match r {
                EnergyReading::Measured { kwh } => total += kwh,
                EnergyReading::Unavailable { reason } => {
                    return EnergyReading::Unavailable { reason: reason.clone() }
                }
            }
        }
        if readings.is_empty() {
            return EnergyReading::Unavailable {
                reason: "no measurement window".into(),
            };
        }
        EnergyReading::Measured { kwh: total }
    }
}

/// A start/stop pair around one configuration.
pub struct EnergyWindow {
    start: Result<f64, String>,
}

impl EnergyWindow {
    pub fn open(provider: &mut dyn EnergyProvider) -> Self {
        EnergyWindow {
            start: provider.start().map_err(|e| e.to_string()),
        }
    }

    pub fn close(self, provider: &mut dyn EnergyProvider) -> EnergyReading {
        let start = match self.start {
            Ok(s) => s,
            Err(reason) => return EnergyReading::Unavailable { reason },
        };
        match provider.stop() {
            Ok(end) if end >= start => EnergyReading::Measured { kwh: end - start },
            Ok(end) => EnergyReading::Unavailable {
                reason: EnergyError::NonMonotonic { start, end }.to_string(),
            },
            Err(e) => EnergyReading::Unavailable { reason: e.to_string() },
        }
    }
}

/// Running totals for one configuration. Durations are kept in integer
/// nanoseconds so the fold is exact and order-independent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EfficiencyAccumulator {
    pub total_ns: u128,
    pub total_output_chars: u64,
    pub n_queries: u64,
}

impl EfficiencyAccumulator {
    pub fn record(&mut self, duration_ns: u64, output_chars: u64) {
        self.total_ns += u128::from(duration_ns);
        self.total_output_chars += output_chars;
        self.n_queries += 1;
    }

    pub fn merge(&mut self, other: &EfficiencyAccumulator) {
        self.total_ns += other.total_ns;
        self.total_output_chars += other.total_output_chars;
        self.n_queries += other.n_queries;
    }
}

pub fn record_query_efficiency(record: &QueryRecord, acc: &mut EfficiencyAccumulator) {
    acc.record(record.duration_ns, record.output_chars as u64);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub total_energy_kwh: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_unavailable: Option<String>,
    pub total_inference_s: f64,
    /// `None` when no query completed.
    pub avg_inference_s: Option<f64>,
    pub total_output_chars: u64,
    pub n_queries: u64,
}

pub fn finalize_efficiency(acc: &EfficiencyAccumulator, energy: &EnergyReading) -> EfficiencyReport {
    let total_inference_s = acc.total_ns as f64 / NANOS_PER_SEC;
    let (total_energy_kwh, energy_unavailable) = match energy {
        EnergyReading::Measured { kwh } => (Some(*kwh), None),
        EnergyReading::Unavailable { reason } => (None, Some(reason.clone())),
    };
    EfficiencyReport {
        total_energy_kwh,
        energy_unavailable,
        total_inference_s,
        avg_inference_s: (acc.n_queries > 0).then(|| total_inference_s / acc.n_queries as f64),
        total_output_chars: acc.total_output_chars,
        n_queries: acc.n_queries,
    }
}
