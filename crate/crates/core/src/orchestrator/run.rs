use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use super::config::RunConfig;
use super::grid::{approach_label, expand_grid, Expansion, ExperimentGrid, RunCell};
use super::log::{
    read_log, write_json, CellRef, ConfigurationRecord, LogEntry, LogWriter, ModelSampling, RunHeader,
    StateIndex, TaskRecord, TemplateRecord, HEADER_FILE, INPUTS_DIR, LOG_FILE, RUN_FORMAT,
};
use super::OrchestratorError;
use crate::codebook::Unit;
use crate::efficiency::{EnergyProvider, EnergyWindow};
use crate::gateway::{Clock, Gateway, QueryFailure, QueryRecord, SystemClock};
use crate::prompt::{render_prompt, RenderedPrompt};

pub struct RunOptions {
    pub clock: Arc<dyn Clock>,
    /// Overrides the provider selected in the config.
    pub energy: Option<Box<dyn EnergyProvider>>,
    /// Stop after this many cells have been attempted in this session.
    pub cell_budget: Option<usize>,
    /// Checked between cells; set it to stop cleanly.
    pub cancel: Arc<AtomicBool>,
    /// Re-attempt cells whose previous attempt failed.
    pub retry_failed: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            clock: Arc::new(SystemClock),
            energy: None,
            cell_budget: None,
            cancel: Arc::new(AtomicBool::new(false)),
            retry_failed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub run_id: String,
    pub total_cells: usize,
    /// Cells already done when this session started.
    pub previously_done: usize,
    /// Queries issued in this session.
    pub attempted: usize,
    pub succeeded: usize,
    pub failed: usize,
    /// Cells still without an outcome.
    pub pending: usize,
    /// Stopped by budget or cancellation with work left.
    pub interrupted: bool,
}

fn io_err(path: &Path, e: std::io::Error) -> OrchestratorError {
    OrchestratorError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn run_id_for(grid_hash: &str) -> String {
    format!("run-{}", &grid_hash[..12])
}

fn templates(grid: &ExperimentGrid, exp: &Expansion) -> Vec<TemplateRecord> {
    let placeholder = Unit {
        id: "{unit_id}".into(),
        text: "{text}".into(),
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for c in &exp.configurations {
        if !seen.insert((c.task, c.style, c.approach)) {
            continue;
        }
        let task = &grid.tasks[c.task];
        let style = &grid.styles[c.style];
        let approach = &grid.approaches[c.approach];
        for (section, item) in task.codebook.items_with_sections() {
            let rendered = render_prompt(section, item, &placeholder, style, approach)
                .expect("templates render after preflight");
            out.push(TemplateRecord {
                task: task.spec.id.clone(),
                item_id: item.id.clone(),
                style: style.label().to_owned(),
                approach: approach_label(approach),
                n_examples: approach.example_count(item),
                template: rendered.text,
            });
        }
    }
    out
}

/// Starts a new run in `run_dir`, which must not already hold one.
pub fn start_run(config: &RunConfig, run_dir: &Path, opts: RunOptions) -> Result<RunSummary, OrchestratorError> {
    if run_dir.join(HEADER_FILE).exists() {
        return Err(OrchestratorError::RunExists(run_dir.to_path_buf()));
    }
    let grid = ExperimentGrid::load(config)?;
    let exp = expand_grid(&grid)?;
    let grid_hash = grid.grid_hash();

    let inputs = run_dir.join(INPUTS_DIR);
    std::fs::create_dir_all(&inputs).map_err(|e| io_err(&inputs, e))?;
    for t in &grid.tasks {
        write_json(&inputs.join(format!("{}.codebook.json", t.spec.id)), &t.codebook)?;
        write_json(&inputs.join(format!("{}.truth.json", t.spec.id)), &t.truth)?;
    }
    let energy_provider = opts
        .energy
        .as_ref()
        .map_or_else(|| config.energy.provider().identity(), |p| p.identity());
    let header = RunHeader {
        format: RUN_FORMAT.into(),
        run_id: run_id_for(&grid_hash),
        grid_hash,
        created_at: opts.clock.now().to_rfc3339(),
        config: config.clone(),
        tasks: grid
            .tasks
            .iter()
            .map(|t| TaskRecord {
                id: t.spec.id.clone(),
                codebook_hash: t.codebook.content_hash(),
                truth_hash: t.truth.content_hash(),
            })
            .collect(),
        configurations: exp
            .configurations
            .iter()
            .map(|c| ConfigurationRecord {
                id: c.id.clone(),
                task: grid.tasks[c.task].spec.id.clone(),
                model: grid.models[c.model].name.clone(),
                style: grid.styles[c.style].clone(),
                approach: grid.approaches[c.approach],
                approach_label: approach_label(&grid.approaches[c.approach]),
                repeat: c.repeat,
            })
            .collect(),
        total_cells: exp.cells.len(),
        sampling: grid
            .models
            .iter()
            .zip(&grid.sampling)
            .map(|(m, p)| ModelSampling {
                model: m.name.clone(),
                params: *p,
            })
            .collect(),
        templates: templates(&grid, &exp),
        splits: grid
            .tasks
            .iter()
            .filter_map(|t| t.split.clone().map(|s| (t.spec.id.clone(), s)))
            .collect(),
        evaluation_partition: grid.splits.map(|_| grid.evaluation_partition),
        energy_provider,
    };
    write_json(&run_dir.join(HEADER_FILE), &header)?;
    drive(config, &grid, &exp, &header, run_dir, opts, false)
}

/// Continues a run. The grid, codebooks and ground truth must be unchanged.
pub fn resume_run(config: &RunConfig, run_dir: &Path, opts: RunOptions) -> Result<RunSummary, OrchestratorError> {
    let header = RunHeader::load(run_dir)?;
    let grid = ExperimentGrid::load(config)?;
    for t in &grid.tasks {
        let Some(rec) = header.tasks.iter().find(|r| r.id == t.spec.id) else {
            continue;
        };
        let found = t.codebook.content_hash();
        if found != rec.codebook_hash {
            return Err(OrchestratorError::CodebookChanged {
                task: t.spec.id.clone(),
                expected: rec.codebook_hash.clone(),
                found,
            });
        }
        let found = t.truth.content_hash();
        if found != rec.truth_hash {
            return Err(OrchestratorError::GroundTruthChanged {
                task: t.spec.id.clone(),
                expected: rec.truth_hash.clone(),
                found,
            });
        }
    }
    let found = grid.grid_hash();
    if found != header.grid_hash {
        return Err(OrchestratorError::GridMismatch {
            expected: header.grid_hash.clone(),
            found,
        });
    }
    let exp = expand_grid(&grid)?;
    drive(config, &grid, &exp, &header, run_dir, opts, true)
}

struct Job {
    cell: RunCell,
    prompt: RenderedPrompt,
}

type JobResult = (RunCell, Result<QueryRecord, QueryFailure>);

fn drive(
    config: &RunConfig,
    grid: &ExperimentGrid,
    exp: &Expansion,
    header: &RunHeader,
    run_dir: &Path,
    opts: RunOptions,
    resumed: bool,
) -> Result<RunSummary, OrchestratorError> {
    let log_path = run_dir.join(LOG_FILE);
    let prior = read_log(&log_path)?;
    let mut done: HashSet<String> = HashSet::new();
    let mut failed: HashSet<String> = HashSet::new();
    for e in &prior {
        match e {
            LogEntry::Query { cell, .. } => {
                failed.remove(&cell.key());
                done.insert(cell.key());
            }
            LogEntry::Failure { cell, .. } if !done.contains(&cell.key()) => {
                failed.insert(cell.key());
            }
            _ => {}
        }
    }
    let previously_done = done.len();
    let skip = |key: &str| done.contains(key) || (!opts.retry_failed && failed.contains(key));

    let mut pending_by_config: BTreeMap<usize, Vec<&RunCell>> = BTreeMap::new();
    for cell in &exp.cells {
        if !skip(&exp.cell_key(cell)) {
            pending_by_config.entry(cell.config).or_default().push(cell);
        }
    }

    let mut writer = LogWriter::open(&log_path)?;
    let clock = Arc::clone(&opts.clock);
    writer.append(&LogEntry::Session {
        started_at: clock.now().to_rfc3339(),
        resumed,
    })?;

    let gateway = Gateway::new(
        Arc::clone(&clock),
        Duration::from_secs(config.policies.timeout_s),
        config.policies.concurrency_per_endpoint,
    );
    let models_needed: Vec<usize> = {
        let mut m: Vec<usize> = pending_by_config
            .keys()
            .map(|&ci| exp.configurations[ci].model)
            .collect();
        m.sort_unstable();
        m.dedup();
        m
    };
    for &mi in &models_needed {
        let report = gateway.health_check(&grid.models[mi])?;
        writer.append(&LogEntry::Health { report })?;
    }

    let mut energy: Box<dyn EnergyProvider> = opts.energy.unwrap_or_else(|| config.energy.provider());
    let mut budget = opts.cell_budget.unwrap_or(usize::MAX);
    let mut warmed: HashSet<usize> = HashSet::new();
    let (mut attempted, mut succeeded, mut n_failed) = (0usize, 0usize, 0usize);
    let workers = config.policies.workers.max(1);

    for (&ci, cells) in &pending_by_config {
        if budget == 0 || opts.cancel.load(Ordering::SeqCst) {
            break;
        }
        let conf = &exp.configurations[ci];
        let task = &grid.tasks[conf.task];
        let model = &grid.models[conf.model];
        let sampling = &grid.sampling[conf.model];
        let style = &grid.styles[conf.style];
        let approach = &grid.approaches[conf.approach];

        if warmed.insert(conf.model) {
            match gateway.warm_up(model, sampling) {
                Ok(d) => writer.append(&LogEntry::Warmup {
                    model: model.name.clone(),
                    duration_ns: d.as_nanos() as u64,
                })?,
                Err(e) => tracing::warn!(model = %model.name, error = %e, "warm-up failed"),
            }
        }

        let take = cells.len().min(budget);
        let mut jobs = VecDeque::with_capacity(take);
        for cell in cells.iter().take(take) {
            let unit = task
                .truth
                .unit(&cell.unit_id)
                .expect("expanded cells reference dataset units");
            let section = task.codebook.section_of(&cell.item_id).expect("item has a section");
            let item = task.codebook.item(&cell.item_id).expect("item exists");
            let prompt = render_prompt(section, item, unit, style, approach)?;
            jobs.push_back(Job {
                cell: (*cell).clone(),
                prompt,
            });
        }
        budget -= take;

        let window = EnergyWindow::open(energy.as_mut());
        let started = clock.mark();
        let queue = Mutex::new(jobs);
        let (tx, rx) = mpsc::channel::<JobResult>();
        let mut write_error = None;
        let mut cells_run = 0usize;
        std::thread::scope(|s| {
            for _ in 0..workers.min(take) {
                let tx = tx.clone();
                let queue = &queue;
                let gateway = &gateway;
                let cancel = &opts.cancel;
                let retry = &config.policies.retry;
                s.spawn(move || loop {
                    if cancel.load(Ordering::SeqCst) {
                        break;
                    }
                    let Some(job) = queue.lock().expect("job queue lock").pop_front() else {
                        break;
                    };
                    let r = gateway.submit_query(model, sampling, &job.prompt.text, &job.prompt.fingerprint, retry);
                    if tx.send((job.cell, r)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for (cell, outcome) in rx {
                cells_run += 1;
                let cell_ref = CellRef {
                    config_id: conf.id.clone(),
                    unit_id: cell.unit_id,
                    item_id: cell.item_id,
                };
                let entry = match outcome {
                    Ok(record) => {
                        succeeded += 1;
                        LogEntry::Query { cell: cell_ref, record }
                    }
                    Err(failure) => {
                        n_failed += 1;
                        tracing::warn!(cell = %cell_ref.key(), error = %failure.error, "query failed");
                        LogEntry::Failure { cell: cell_ref, failure }
                    }
                };
                if write_error.is_none() {
                    if let Err(e) = writer.append(&entry) {
                        opts.cancel.store(true, Ordering::SeqCst);
                        write_error = Some(e);
                    }
                }
            }
        });
        if let Some(e) = write_error {
            return Err(e);
        }
        attempted += cells_run;
        let wall_ns = clock.elapsed(started).as_nanos() as u64;
        let reading = window.close(energy.as_mut());
        writer.append(&LogEntry::Window {
            config_id: conf.id.clone(),
            cells: cells_run,
            wall_ns,
            energy: reading,
        })?;
        tracing::info!(config = %conf.id, cells = cells_run, "configuration window closed");
    }

    // Recount from the log so the index reflects every session.
    let entries = read_log(&log_path)?;
    let outcomes = super::log::cell_outcomes(&entries);
    let keys: HashMap<String, ()> = exp.cells.iter().map(|c| (exp.cell_key(c), ())).collect();
    let done_now = outcomes
        .iter()
        .filter(|(k, e)| keys.contains_key(*k) && matches!(e, LogEntry::Query { .. }))
        .count();
    let failed_now = outcomes
        .iter()
        .filter(|(k, e)| keys.contains_key(*k) && matches!(e, LogEntry::Failure { .. }))
        .count();
    let pending = exp.cells.len() - done_now - failed_now;
    StateIndex {
        run_id: header.run_id.clone(),
        grid_hash: header.grid_hash.clone(),
        total_cells: exp.cells.len(),
        done: done_now,
        failed: failed_now,
        pending,
    }
    .write(run_dir)?;

    let remaining_retry = if opts.retry_failed { failed_now } else { 0 };
    Ok(RunSummary {
        run_id: header.run_id.clone(),
        total_cells: exp.cells.len(),
        previously_done,
        attempted,
        succeeded,
        failed: n_failed,
        pending,
        interrupted: pending + remaining_retry > 0
            && (budget == 0 || opts.cancel.load(Ordering::SeqCst)),
    })
}
