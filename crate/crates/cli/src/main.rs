use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use annobench::codebook::{load_codebook, Partition, Unit};
use annobench::efficiency::MeterSource;
use annobench::gateway::stub::{StubConfig, StubModel, StubServer};
use annobench::gateway::Gateway;
use annobench::metrics::NonCompliancePolicy;
use annobench::orchestrator::{
    evaluate_run, expand_grid, resume_run, start_run, workflow_advisor, AdvisorInput, EfficiencyConstraints,
    EnergyConfig, EvaluationOptions, ExperimentGrid, RunConfig, RunOptions, RunSummary, StepStatus,
};
use annobench::prompt::{render_prompt, LearningApproach, PromptStyle};
use annobench::reporting::{build_reports, stage_results, validate_manifest, MANIFEST_JSON_SCHEMA};

/// Stdout writes that surface errors, so a closed pipe ends the command quietly.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        write!(std::io::stdout(), $($arg)*)?
    }};
}

macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        writeln!(std::io::stdout(), $($arg)*)?
    }};
}

/// Codebook-driven benchmarking of LLM annotation pipelines.
#[derive(Parser)]
#[command(name = "annobench", version, about)]
struct Cli {
    /// More log output (repeatable); RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a run config: codebooks, ground truth, grid and optionally endpoints.
    Validate {
        config: PathBuf,
        /// Also contact every endpoint and confirm the model is served.
        #[arg(long)]
        check_endpoints: bool,
    },
    /// Print or write the train/validation/test assignment of every task.
    Split {
        config: PathBuf,
        /// Write the splits as JSON here instead of printing counts.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Start a new run in an empty run directory.
    Run {
        config: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Continue an interrupted run; completed cells are never re-queried.
    Resume {
        config: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        /// Re-attempt cells whose queries failed.
        #[arg(long)]
        retry_failed: bool,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Compute metrics from a run log and print them as JSON.
    Evaluate {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        /// Also score nested items conditioned on the model's own parent answers.
        #[arg(long)]
        model_path: bool,
        /// Leave out configurations with unqueried cells.
        #[arg(long)]
        partial: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write metric tables, the manifest and trade-off data for a run.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        /// Output directory (default: <run-dir>/report).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        /// Report an incomplete run; the manifest is marked partial.
        #[arg(long)]
        partial: bool,
        /// Fail unless every manifest section is present.
        #[arg(long)]
        validate: bool,
    },
    /// Print the prompt for one item and text.
    Render(RenderArgs),
    /// Recommend the next workflow stage from completed results.
    Advise(AdviseArgs),
    /// Serve canned answers on the backend protocols (demos and tests).
    #[command(hide = true)]
    StubServer {
        #[arg(long, default_value = "127.0.0.1:11434")]
        addr: String,
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long, default_value = "{\"response\": 1}")]
        reply: String,
    },
}

#[derive(Args)]
struct ExecArgs {
    /// Stop after this many cells (the run stays resumable).
    #[arg(long)]
    budget: Option<usize>,
    /// Read cumulative energy from a newline-delimited meter file.
    #[arg(long, conflicts_with = "energy_command")]
    energy_file: Option<PathBuf>,
    /// Read cumulative energy from the output of a shell command.
    #[arg(long)]
    energy_command: Option<String>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    codebook: PathBuf,
    /// Item id (default: the first item).
    #[arg(long)]
    item: Option<String>,
    /// Unit text; read from stdin when absent.
    #[arg(long)]
    text: Option<String>,
    #[arg(long, value_enum, default_value_t = StyleArg::Standard)]
    style: StyleArg,
    #[arg(long)]
    few_shot: bool,
    /// Cap on demonstrations per item (implies --few-shot).
    #[arg(long)]
    max_examples: Option<usize>,
}

#[derive(Args)]
struct AdviseArgs {
    /// Completed run to take results from.
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    run_dir: Option<PathBuf>,
    /// Advisor input as JSON instead of a run.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    satisfactory_f1: Option<f64>,
    #[arg(long)]
    max_energy_kwh: Option<f64>,
    #[arg(long)]
    max_avg_inference_s: Option<f64>,
    #[arg(long)]
    max_parameter_count: Option<u64>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Exclude,
    Penalize,
}

impl From<PolicyArg> for NonCompliancePolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Exclude => NonCompliancePolicy::Exclude,
            PolicyArg::Penalize => NonCompliancePolicy::Penalize,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Standard,
    Persona,
    Cot,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default)))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.downcast_ref::<std::io::Error>()
        .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Validate {
            config,
            check_endpoints,
        } => validate(&config, check_endpoints),
        Command::Split { config, out } => split(&config, out.as_deref()),
        Command::Run { config, run_dir, exec } => execute(&config, &run_dir, &exec, None),
        Command::Resume {
            config,
            run_dir,
            retry_failed,
            exec,
        } => execute(&config, &run_dir, &exec, Some(retry_failed)),
        Command::Evaluate {
            run_dir,
            policy,
            model_path,
            partial,
            out,
        } => {
            let opts = EvaluationOptions {
                policy: policy.map(Into::into),
                model_path,
                skip_incomplete: partial,
            };
            let eval = evaluate_run(&run_dir, &opts)?;
            emit(&(serde_json::to_string_pretty(&eval)? + "\n"), out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Report {
            run_dir,
            out,
            policy,
            partial,
            validate,
        } => report(&run_dir, out, policy, partial, validate),
        Command::Render(args) => render(&args),
        Command::Advise(args) => advise(&args),
        Command::StubServer { addr, models, reply } => {
            let server = StubServer::bind(&addr, StubConfig::constant(models.into_iter().map(StubModel::new).collect(), reply))
                .with_context(|| format!("binding {addr}"))?;
            eprintln!("stub server listening on {}", server.url());
            server.join();
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            out!("{text}");
            Ok(())
        }
    }
}

fn validate(config_path: &Path, check_endpoints: bool) -> Result<ExitCode> {
    let config = RunConfig::load(config_path)?;
    let grid = ExperimentGrid::load(&config)?;
    let exp = expand_grid(&grid)?;
    for t in &grid.tasks {
        let items = t.codebook.items().count();
        outln!("task {}: {} unit(s), {items} item(s)", t.spec.id, t.truth.units.len());
    }
    outln!(
        "{} model(s), {} configuration(s), {} cell(s)",
        grid.models.len(),
        exp.configurations.len(),
        exp.cells.len()
    );
    if check_endpoints {
        let gateway = Gateway::new(
            Arc::new(annobench::gateway::SystemClock),
            std::time::Duration::from_secs(config.policies.timeout_s),
            1,
        );
        for m in &grid.models {
            let h = gateway.health_check(m).with_context(|| format!("model `{}`", m.name))?;
            outln!("model {}: {} at {} ({})", m.name, m.version_tag, m.endpoint.url, h.server_version);
            for w in &h.warnings {
                outln!("  warning: {w}");
            }
        }
    }
    outln!("config OK");
    Ok(ExitCode::SUCCESS)
}

fn split(config_path: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let config = RunConfig::load(config_path)?;
    if config.splits.is_none() {
        bail!("config has no `splits` section");
    }
    let grid = ExperimentGrid::load(&config)?;
    let splits: std::collections::BTreeMap<&str, _> = grid
        .tasks
        .iter()
        .filter_map(|t| t.split.as_ref().map(|s| (t.spec.id.as_str(), s)))
        .collect();
    for (task, s) in &splits {
        let counts: Vec<String> = Partition::ALL
            .iter()
            .map(|p| format!("{} {}", p.as_str(), s.count(*p)))
            .collect();
        outln!("task {task}: {}", counts.join(", "));
        for w in &s.warnings {
            outln!("  warning: {w}");
        }
    }
    if let Some(path) = out {
        emit(&(serde_json::to_string_pretty(&splits)? + "\n"), Some(path))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn execute(config_path: &Path, run_dir: &Path, exec: &ExecArgs, resume: Option<bool>) -> Result<ExitCode> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(path) = &exec.energy_file {
        config.energy = EnergyConfig::External {
            source: MeterSource::File { path: path.clone() },
        };
    }
    if let Some(cmd) = &exec.energy_command {
        config.energy = EnergyConfig::External {
            source: MeterSource::Command {
                program: "sh".into(),
                args: vec!["-c".into(), cmd.clone()],
            },
        };
    }
    let cancel = Arc::new(AtomicBool::new(false));
    {
        let cancel = Arc::clone(&cancel);
        ctrlc::set_handler(move || {
            if cancel.swap(true, Ordering::SeqCst) {
                std::process::exit(130);
            }
            eprintln!("interrupt: finishing in-flight queries; press Ctrl-C again to abort");
        })
        .context("installing the interrupt handler")?;
    }
    let opts = RunOptions {
        cell_budget: exec.budget,
        cancel: Arc::clone(&cancel),
        retry_failed: resume.unwrap_or(false),
        ..RunOptions::default()
    };
    let summary = match resume {
        None => start_run(&config, run_dir, opts)?,
        Some(_) => resume_run(&config, run_dir, opts)?,
    };
    print_summary(&summary)?;
    // A budget stop is a normal exit; only a signal maps to 130.
    Ok(if summary.interrupted && cancel.load(Ordering::SeqCst) {
        ExitCode::from(130)
    } else {
        ExitCode::SUCCESS
    })
}

fn print_summary(s: &RunSummary) -> Result<()> {
    outln!(
        "{}: {} cell(s), {} done before this session, {} attempted ({} ok, {} failed), {} pending{}",
        s.run_id,
        s.total_cells,
        s.previously_done,
        s.attempted,
        s.succeeded,
        s.failed,
        s.pending,
        if s.interrupted { ", interrupted" } else { "" }
    );
    Ok(())
}

fn report(
    run_dir: &Path,
    out: Option<PathBuf>,
    policy: Option<PolicyArg>,
    partial: bool,
    validate: bool,
) -> Result<ExitCode> {
    let docs = build_reports(run_dir, policy.map(Into::into), partial)?;
    let out = out.unwrap_or_else(|| run_dir.join("report"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let files: [(&str, &str); 7] = [
        ("metrics.csv", &docs.metrics_csv),
        ("metrics.json", &docs.metrics_json),
        ("compliance.csv", &docs.compliance_csv),
        ("manifest.json", &docs.manifest_json),
        ("manifest.schema.json", MANIFEST_JSON_SCHEMA),
        ("tradeoff.csv", &docs.tradeoff_csv),
        ("tradeoff.svg", &docs.tradeoff_svg),
    ];
    for (name, text) in files {
        emit(text, Some(&out.join(name)))?;
    }
    outln!("wrote {} report file(s) to {}", files.len(), out.display());
    for w in &docs.manifest.warnings {
        eprintln!("warning: {w}");
    }
    if validate {
        validate_manifest(&docs.manifest)?;
        outln!("manifest complete: all sections present");
    }
    Ok(ExitCode::SUCCESS)
}

fn render(args: &RenderArgs) -> Result<ExitCode> {
    let cb = load_codebook(&args.codebook)?;
    let item = match &args.item {
        Some(id) => cb.item(id).with_context(|| format!("no item `{id}` in {}", cb.id))?,
        None => cb.root_item(),
    };
    let section = cb.section_of(&item.id).context("item has no section")?;
    let text = match &args.text {
        Some(t) => t.clone(),
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            s.trim_end_matches('\n').to_owned()
        }
    };
    let style = match args.style {
        StyleArg::Standard => PromptStyle::Standard,
        StyleArg::Persona => PromptStyle::persona(),
        StyleArg::Cot => PromptStyle::chain_of_thought(),
    };
    let approach = if args.few_shot || args.max_examples.is_some() {
        LearningApproach::FewShot {
            max_examples: args.max_examples,
        }
    } else {
        LearningApproach::ZeroShot
    };
    let unit = Unit {
        id: "cli".into(),
        text,
    };
    let prompt = render_prompt(section, item, &unit, &style, &approach)?;
    outln!("{}", prompt.text);
    Ok(ExitCode::SUCCESS)
}

fn advise(args: &AdviseArgs) -> Result<ExitCode> {
    let mut input = match (&args.input, &args.run_dir) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<AdvisorInput>(&text)?
        }
        (None, Some(run_dir)) => AdvisorInput {
            results: stage_results(&build_reports(run_dir, None, true)?.tradeoff),
            ..AdvisorInput::default()
        },
        (None, None) => bail!("give --run-dir or --input"),
    };
    if args.satisfactory_f1.is_some() {
        input.satisfactory_f1 = args.satisfactory_f1;
    }
    let c = &mut input.constraints;
    let given = EfficiencyConstraints {
        max_energy_kwh: args.max_energy_kwh.or(c.max_energy_kwh),
        max_avg_inference_s: args.max_avg_inference_s.or(c.max_avg_inference_s),
        max_parameter_count: args.max_parameter_count.or(c.max_parameter_count),
    };
    *c = given;
    let report = workflow_advisor(&input)?;
    if args.json {
        outln!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(ExitCode::SUCCESS);
    }
    for s in &report.steps {
        let status = match s.status {
            StepStatus::Done => "done",
            StepStatus::Next => "next",
            StepStatus::Pending => "pending",
            StepStatus::Skippable => "skippable",
            StepStatus::Blocked => "blocked",
        };
        outln!("{}. [{status}] {}", s.step, s.action);
        if !s.detail.is_empty() {
            outln!("   {}", s.detail);
        }
    }
    Ok(ExitCode::SUCCESS)
}
