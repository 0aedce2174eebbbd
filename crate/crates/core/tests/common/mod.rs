#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use annobench::codebook::{load_codebook, Codebook};
use annobench::efficiency::MockProvider;
use annobench::gateway::stub::{Responder, StubConfig, StubModel, StubReply, StubRequest, StubServer};
use annobench::gateway::{Endpoint, FixedClock, ModelConfig, Protocol, SamplingCard};
use annobench::orchestrator::{
    CrossingRule, EnergyConfig, HardwareSpec, Policies, RunConfig, RunOptions, TaskSpec,
};
use annobench::prompt::{LearningApproach, PromptStyle, DEFAULT_COT, DEFAULT_PERSONA, DEMONSTRATION_PREFIX};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn codebook_path(id: &str) -> PathBuf {
    fixtures().join("codebooks").join(format!("{id}.json"))
}

pub fn codebook(id: &str) -> Codebook {
    load_codebook(codebook_path(id)).expect("fixture codebook loads")
}

/// Gold label of toy unit `n`: 1..=9 positive, 10..=20 negative.
pub fn toy_gold(n: usize) -> i64 {
    i64::from(n <= 9)
}

pub fn toy_text(n: usize) -> String {
    format!("Toy economic report {n:02}: output and hiring figures for the quarter.")
}

/// Writes the 20-unit binary toy ground truth and returns its path.
pub fn write_toy_truth(dir: &Path) -> PathBuf {
    let mut csv = String::from("unit_id,text,positivity\n");
    for n in 1..=20 {
        csv.push_str(&format!("t{n:02},\"{}\",{}\n", toy_text(n), toy_gold(n)));
    }
    let path = dir.join("toy-truth.csv");
    std::fs::write(&path, csv).unwrap();
    path
}

pub fn toy_task(dir: &Path) -> TaskSpec {
    TaskSpec {
        id: "sentiment".into(),
        codebook: codebook_path("sentiment"),
        ground_truth: write_toy_truth(dir),
    }
}

/// Toy unit number embedded in a rendered prompt.
pub fn unit_number(req: &StubRequest) -> usize {
    let text = req.unit_text().expect("prompt carries a unit text");
    let digits = &text["Toy economic report ".len()..][..2];
    digits.parse().expect("toy unit number")
}

/// 0 standard, 1 persona, 2 CoT.
pub fn style_index(prompt: &str) -> usize {
    if prompt.starts_with(DEFAULT_PERSONA) {
        1
    } else if prompt.ends_with(DEFAULT_COT) {
        2
    } else {
        0
    }
}

pub fn approach_index(prompt: &str) -> usize {
    usize::from(prompt.contains(DEMONSTRATION_PREFIX))
}

pub const ALPHA_TAG: &str = "alpha:1b";
pub const BETA_TAG: &str = "beta:7b";

/// The scripted answer of the end-to-end toy run; `None` is a reply
/// without JSON.
pub fn toy_answer(m: usize, s: usize, a: usize, n: usize) -> Option<i64> {
    if (n + m + s + 2 * a) % 13 == 0 {
        return None;
    }
    let flip = (n * (2 * m + 3) + 4 * s + 7 * a) % 11 < 2 + s + a + m;
    Some(toy_gold(n) ^ i64::from(flip))
}

/// Renders an answer in one of several output shapes a model might use.
pub fn wrap_answer(n: usize, v: Option<i64>) -> String {
    match v {
        None => "I cannot decide on this one.".into(),
        Some(v) => match n % 3 {
            0 => format!("Sure! {{\"response\": {v}}}"),
            1 => format!("{{\"response\": {v}}}"),
            _ => format!("<think>could be {{\"response\": {}}}</think>\n```json\n{{\"response\": \"{v}\"}}\n```", 1 - v),
        },
    }
}

pub fn toy_responder() -> Responder {
    Arc::new(|req: &StubRequest, _seen| {
        let m = usize::from(req.model() == BETA_TAG);
        let p = req.prompt();
        let n = unit_number(req);
        StubReply::Text(wrap_answer(n, toy_answer(m, style_index(p), approach_index(p), n)))
    })
}

pub fn stub(responder: Responder) -> StubServer {
    StubServer::start(StubConfig::new(vec![StubModel::new(ALPHA_TAG), StubModel::new(BETA_TAG)], responder)).unwrap()
}

pub fn model(name: &str, tag: &str, url: &str) -> ModelConfig {
    ModelConfig {
        name: name.into(),
        version_tag: tag.into(),
        parameter_count: if tag == ALPHA_TAG { 1_000_000_000 } else { 7_000_000_000 },
        quantisation: "Q4_K_M".into(),
        quantisation_method: "GGUF k-quant".into(),
        sampling: SamplingCard {
            temperature: Some(0.6),
            top_k: None,
            top_p: Some(0.95),
        },
        endpoint: Endpoint {
            url: url.into(),
            protocol: Protocol::Generate,
        },
        reasoning_model: false,
        digest: None,
    }
}

pub fn hardware() -> HardwareSpec {
    HardwareSpec {
        accelerator: "2 x NVIDIA A100-PCIE-40GB".into(),
        memory: "80 GB GPU, 256 GB host".into(),
        inference_framework: "Ollama".into(),
    }
}

/// 2 models × 3 styles × 2 approaches on the toy task.
pub fn toy_config(dir: &Path, url: &str) -> RunConfig {
    RunConfig {
        tasks: vec![toy_task(dir)],
        models: vec![model("Alpha", ALPHA_TAG, url), model("Beta", BETA_TAG, url)],
        styles: vec![PromptStyle::Standard, PromptStyle::persona(), PromptStyle::chain_of_thought()],
        approaches: vec![LearningApproach::ZeroShot, LearningApproach::few_shot()],
        crossing_rules: Vec::<CrossingRule>::new(),
        evaluation_partition: annobench::codebook::Partition::Validation,
        allow_test_partition: false,
        splits: None,
        repeats: 1,
        policies: Policies::default(),
        hardware: Some(hardware()),
        energy: EnergyConfig::Mock { step_kwh: 0.0 },
    }
}

/// Energy per answered query, a power of two so sums are exact in any
/// grouping.
pub const KWH_PER_QUERY: f64 = 1.0 / 1024.0;

/// Run options with a fixed clock and a mock meter advanced by the stub on
/// every answered query. Clones of the meter share one reading.
pub struct Metered {
    pub meter: MockProvider,
}

impl Metered {
    pub fn new() -> Self {
        Metered {
            meter: MockProvider::new(0.0),
        }
    }

    pub fn options(&self, budget: Option<usize>) -> RunOptions {
        RunOptions {
            clock: Arc::new(FixedClock::new(Duration::from_millis(250))),
            energy: Some(Box::new(self.meter.clone())),
            cell_budget: budget,
            ..RunOptions::default()
        }
    }

    /// Wraps a responder so each answered query adds [`KWH_PER_QUERY`].
    pub fn responder(&self, inner: Responder) -> Responder {
        let reading = self.meter.handle();
        Arc::new(move |req: &StubRequest, seen| {
            let reply = inner(req, seen);
            if matches!(reply, StubReply::Text(_)) {
                *reading.lock().unwrap() += KWH_PER_QUERY;
            }
            reply
        })
    }
}

pub fn fixed_options(budget: Option<usize>) -> RunOptions {
    RunOptions {
        clock: Arc::new(FixedClock::new(Duration::from_millis(250))),
        energy: None,
        cell_budget: budget,
        ..RunOptions::default()
    }
}
