//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use annobench::codebook::{GroundTruthDataset, Label, Unit};
use annobench::gateway::stub::{StubReply, StubRequest};
use annobench::gateway::{ParamSource, Protocol, SamplingCard};
use annobench::metrics::{
    classification_metrics, cohen_kappa, confusion_matrix, evaluate_item, krippendorff_alpha,
    quadratic_weighted_kappa, spearman_rho, AlphaLevel, ConfusionMatrix, EvaluationScope, NonCompliancePolicy,
};
use annobench::orchestrator::{
    evaluate_run, expand_grid, resume_run, start_run, CrossingRule, EnergyConfig, EvaluationOptions,
    ExperimentGrid, RulePreset, RunConfig, TaskSpec,
};
use annobench::parser::{NonCompliance, ParsedAnnotation};
use annobench::prompt::{render_prompt, LearningApproach, PromptStyle};
use annobench::reporting::{build_reports, emit_metrics_table, validate_manifest, MetricsRow, ReportError, TableFormat};
use annobench::codebook::AnnotationType;

use common::*;

type Outcome = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9,
        (None, None) => true,
        _ => false,
    }
}

// Brute-force definitions used as oracles for criterion 1.

fn oracle_classification(pairs: &[(usize, usize)], k: usize) -> (f64, f64, f64, f64) {
    let n = pairs.len() as f64;
    let acc = pairs.iter().filter(|(g, p)| g == p).count() as f64 / n;
    let (mut ps, mut rs, mut fs) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..k {
        let tp = pairs.iter().filter(|&&(g, p)| g == c && p == c).count() as f64;
        let fp = pairs.iter().filter(|&&(g, p)| g != c && p == c).count() as f64;
        let fn_ = pairs.iter().filter(|&&(g, p)| g == c && p != c).count() as f64;
        if tp + fp + fn_ == 0.0 {
            continue;
        }
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        ps.push(p);
        rs.push(r);
        fs.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (acc, mean(&ps), mean(&rs), mean(&fs))
}

fn oracle_kappa(pairs: &[(usize, usize)], k: usize) -> f64 {
    let n = pairs.len() as f64;
    let po = pairs.iter().filter(|(g, p)| g == p).count() as f64 / n;
    let pe: f64 = (0..k)
        .map(|c| {
            let g = pairs.iter().filter(|x| x.0 == c).count() as f64 / n;
            let p = pairs.iter().filter(|x| x.1 == c).count() as f64 / n;
            g * p
        })
        .sum();
    if pe == 1.0 {
        return if po == 1.0 { 1.0 } else { 0.0 };
    }
    (po - pe) / (1.0 - pe)
}

fn oracle_qwk(pairs: &[(usize, usize)], k: usize) -> Option<f64> {
    if k < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let mut o = vec![vec![0.0; k]; k];
    for &(g, p) in pairs {
        o[g][p] += 1.0 / n;
    }
    let hist = |f: fn(&(usize, usize)) -> usize, c: usize| pairs.iter().filter(|x| f(x) == c).count() as f64 / n;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64) / (k as f64 - 1.0)).powi(2);
            num += w * o[i][j];
            den += w * hist(|x| x.0, i) * hist(|x| x.1, j);
        }
    }
    (den != 0.0).then(|| 1.0 - num / den)
}

/// Alpha from its pairwise definition: observed disagreement over all
/// ordered within-unit pairs, expected disagreement over all ordered pairs
/// of pairable values.
fn oracle_alpha(units: &[Vec<f64>], level: AlphaLevel) -> Option<f64> {
    let pairable: Vec<&Vec<f64>> = units.iter().filter(|u| u.len() >= 2).collect();
    let values: Vec<f64> = pairable.iter().flat_map(|u| u.iter().copied()).collect();
    let n = values.len() as f64;
    if values.is_empty() {
        return None;
    }
    // Values are small integers; count them once for the ordinal metric.
    let mut counts: BTreeMap<i64, f64> = BTreeMap::new();
    for &v in &values {
        *counts.entry(v as i64).or_default() += 1.0;
    }
    let delta = |a: f64, b: f64| -> f64 {
        match level {
            AlphaLevel::Nominal => f64::from(u8::from(a != b)),
            AlphaLevel::Interval => (a - b).powi(2),
            AlphaLevel::Ordinal => {
                let (lo, hi) = if a <= b { (a as i64, b as i64) } else { (b as i64, a as i64) };
                let between: f64 = counts.range(lo..=hi).map(|(_, c)| c).sum();
                (between - (counts[&(a as i64)] + counts[&(b as i64)]) / 2.0).powi(2)
            }
        }
    };
    let mut d_o = 0.0;
    for u in &pairable {
        let m = u.len() as f64;
        for i in 0..u.len() {
            for j in 0..u.len() {
                if i != j {
                    d_o += delta(u[i], u[j]) / (m - 1.0);
                }
            }
        }
    }
    d_o /= n;
    let mut d_e = 0.0;
    for i in 0..values.len() {
        for j in 0..values.len() {
            if i != j {
                d_e += delta(values[i], values[j]);
            }
        }
    }
    d_e /= n * (n - 1.0);
    (d_e != 0.0).then(|| 1.0 - d_o / d_e)
}

fn oracle_rank(xs: &[f64], x: f64) -> f64 {
    let below = xs.iter().filter(|&&v| v < x).count() as f64;
    let equal = xs.iter().filter(|&&v| v == x).count() as f64;
    below + (equal + 1.0) / 2.0
}

fn oracle_spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let ra: Vec<f64> = a.iter().map(|&x| oracle_rank(a, x)).collect();
    let rb: Vec<f64> = b.iter().map(|&x| oracle_rank(b, x)).collect();
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let m = ConfusionMatrix::from_counts(vec![Label::Int(1), Label::Int(0)], vec![vec![45, 5], vec![10, 40]]);
    let kappa = cohen_kappa(&m).map_err(|e| e.to_string())?.value;
    ensure!(kappa == 0.7, "kappa of [[45,5],[10,40]] is {kappa}, expected exactly 0.7");

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for case in 0..1000 {
        let n = rng.random_range(1..=50usize);
        let k = rng.random_range(2..=8usize);
        // Skew predictions toward gold so agreement varies across cases.
        let agree = rng.random_range(0.0..1.0);
        let pairs: Vec<(usize, usize)> = (0..n)
            .map(|_| {
                let g = rng.random_range(0..k);
                let p = if rng.random_bool(agree) { g } else { rng.random_range(0..k) };
                (g, p)
            })
            .collect();
        let labels: Vec<Label> = (0..k as i64).map(Label::Int).collect();
        let lp: Vec<(Label, Label)> = pairs
            .iter()
            .map(|&(g, p)| (Label::Int(g as i64), Label::Int(p as i64)))
            .collect();
        let cm = confusion_matrix(&lp, &labels).map_err(|e| e.to_string())?;

        let got = classification_metrics(&cm).map_err(|e| e.to_string())?;
        let (acc, p, r, f1) = oracle_classification(&pairs, k);
        for (name, a, b) in [
            ("accuracy", got.accuracy, acc),
            ("precision", got.macro_precision, p),
            ("recall", got.macro_recall, r),
            ("f1", got.macro_f1, f1),
        ] {
            ensure!(close(Some(a), Some(b)), "case {case}: {name} {a} vs oracle {b}");
        }
        let kappa = cohen_kappa(&cm).map_err(|e| e.to_string())?.value;
        let expected = oracle_kappa(&pairs, k);
        ensure!(close(Some(kappa), Some(expected)), "case {case}: kappa {kappa} vs oracle {expected}");
        let qwk = quadratic_weighted_kappa(&cm).map_err(|e| e.to_string())?;
        let expected = oracle_qwk(&pairs, k);
        ensure!(close(qwk, expected), "case {case}: qwk {qwk:?} vs oracle {expected:?}");

        let golds: Vec<f64> = pairs.iter().map(|p| p.0 as f64 + 1.0).collect();
        let preds: Vec<f64> = pairs.iter().map(|p| p.1 as f64 + 1.0).collect();
        let rho = spearman_rho(&golds, &preds).map_err(|e| e.to_string())?;
        let expected = oracle_spearman(&golds, &preds);
        ensure!(close(rho, expected), "case {case}: rho {rho:?} vs oracle {expected:?}");

        // Up to four coders per unit, some values missing.
        let units: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let coders = rng.random_range(1..=4usize);
                let mut u = vec![golds[i], preds[i]];
                u.truncate(coders.min(2));
                for _ in 2..coders {
                    u.push(rng.random_range(1..=k) as f64);
                }
                u
            })
            .collect();
        for level in [AlphaLevel::Nominal, AlphaLevel::Ordinal, AlphaLevel::Interval] {
            let got = krippendorff_alpha(&units, level);
            let expected = oracle_alpha(&units, level);
            ensure!(close(got, expected), "case {case}: alpha {level:?} {got:?} vs oracle {expected:?}");
        }
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(())
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let cases = [
        ("binary", "psych-dist", "presence", "Forest fires in southern Europe destroyed thousands of hectares last summer."),
        ("categorical", "topic-8", "domain", "We will cut income tax for \"hard-working families\" on low pay."),
        ("likert", "approval", "approval", "We welcome the compromise, although some concerns about Article 5 remain."),
    ];
    let styles = [
        ("standard", PromptStyle::Standard),
        ("persona", PromptStyle::persona()),
        ("cot", PromptStyle::chain_of_thought()),
    ];
    let approaches = [("zero_shot", LearningApproach::ZeroShot), ("few_shot", LearningApproach::few_shot())];
    let mut checked = 0;
    for (kind, book, item_id, text) in cases {
        let cb = codebook(book);
        let item = cb.item(item_id).ok_or("item missing")?;
        let section = cb.section_of(item_id).ok_or("section missing")?;
        let unit = Unit {
            id: "u1".into(),
            text: text.into(),
        };
        for (sname, style) in &styles {
            for (aname, approach) in &approaches {
                let name = format!("{kind}__{sname}__{aname}.txt");
                let golden = std::fs::read_to_string(fixtures().join("goldens").join(&name)).map_err(|e| e.to_string())?;
                let rendered = render_prompt(section, item, &unit, style, approach).map_err(|e| e.to_string())?;
                ensure!(rendered.text == golden, "{name} differs from golden:\n{}", rendered.text);
                ensure!(
                    rendered.text.contains("\nReturn your response in JSON format, with the key \"response\".\n"),
                    "{name}: JSON instruction line missing"
                );
                if kind == "binary" {
                    ensure!(
                        rendered.text.contains("\nRespond with 1 if \"Yes\" or 0 if \"No\".\n"),
                        "{name}: binary instruction line missing"
                    );
                }
                checked += 1;
            }
        }
    }
    ensure!(checked == 18, "checked {checked} prompts");
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(())
}

/// Metrics CSV derived independently from the scripted toy answers.
const TOY_METRICS_CSV: &str = "\
Model,Learning Approach,Prompt Style,Task,F1,Accuracy,Precision,Recall,kappa,alpha
Alpha,Few-Shot,CoT,sentiment,0.578,0.579,0.583,0.585,0.165,0.178
Alpha,Few-Shot,persona,sentiment,0.632,0.632,0.633,0.633,0.265,0.283
Alpha,Few-Shot,standard,sentiment,0.683,0.684,0.683,0.683,0.367,0.383
Alpha,Zero-Shot,CoT,sentiment,0.578,0.579,0.578,0.578,0.156,0.178
Alpha,Zero-Shot,persona,sentiment,0.737,0.737,0.739,0.739,0.475,0.488
Alpha,Zero-Shot,standard,sentiment,0.842,0.842,0.844,0.844,0.685,0.693
Beta,Few-Shot,CoT,sentiment,0.472,0.474,0.478,0.477,-0.044,-0.028
Beta,Few-Shot,persona,sentiment,0.578,0.579,0.583,0.585,0.165,0.178
Beta,Few-Shot,standard,sentiment,0.683,0.684,0.683,0.683,0.367,0.383
Beta,Zero-Shot,CoT,sentiment,0.578,0.579,0.578,0.578,0.156,0.178
Beta,Zero-Shot,persona,sentiment,0.578,0.579,0.578,0.578,0.156,0.178
Beta,Zero-Shot,standard,sentiment,0.737,0.737,0.739,0.739,0.475,0.488
";

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let server = stub(toy_responder());
    let config = toy_config(dir.path(), server.url());
    let run_dir = dir.path().join("run");
    let summary = start_run(&config, &run_dir, fixed_options(None)).map_err(|e| e.to_string())?;
    ensure!(summary.total_cells == 240, "total cells {}", summary.total_cells);
    ensure!(
        summary.pending == 0 && summary.failed == 0 && !summary.interrupted,
        "run incomplete: {summary:?}"
    );
    ensure!(server.query_count() == 240, "stub saw {} queries", server.query_count());
    let docs = build_reports(&run_dir, None, false).map_err(|e| e.to_string())?;
    ensure!(
        docs.metrics_csv == TOY_METRICS_CSV,
        "metrics CSV differs:\n{}",
        docs.metrics_csv
    );
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(())
}

struct RunOutputs {
    metrics_csv: String,
    compliance_csv: String,
    tradeoff_csv: String,
    manifest_json: String,
}

fn outputs(run_dir: &Path) -> Result<RunOutputs, String> {
    let docs = build_reports(run_dir, None, false).map_err(|e| e.to_string())?;
    validate_manifest(&docs.manifest).map_err(|e| e.to_string())?;
    Ok(RunOutputs {
        metrics_csv: docs.metrics_csv,
        compliance_csv: docs.compliance_csv,
        tradeoff_csv: docs.tradeoff_csv,
        manifest_json: docs.manifest_json,
    })
}

fn criterion_4() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let reference = {
        let metered = Metered::new();
        let server = stub(metered.responder(toy_responder()));
        let config = toy_config(dir.path(), server.url());
        let run_dir = dir.path().join("full");
        start_run(&config, &run_dir, metered.options(None)).map_err(|e| e.to_string())?;
        outputs(&run_dir)?
    };
    for k in [1usize, 7, 19] {
        let metered = Metered::new();
        let run_dir = dir.path().join(format!("killed-{k}"));
        let first = stub(metered.responder(toy_responder()));
        let config = toy_config(dir.path(), first.url());
        let s = start_run(&config, &run_dir, metered.options(Some(k))).map_err(|e| e.to_string())?;
        ensure!(s.interrupted && s.attempted == k, "k={k}: first session {s:?}");
        ensure!(first.query_count() == k, "k={k}: first session issued {}", first.query_count());
        drop(first);

        let second = stub(metered.responder(toy_responder()));
        let config = RunConfig {
            models: vec![model("Alpha", ALPHA_TAG, second.url()), model("Beta", BETA_TAG, second.url())],
            ..config
        };
        let s = resume_run(&config, &run_dir, metered.options(None)).map_err(|e| e.to_string())?;
        ensure!(s.pending == 0 && !s.interrupted, "k={k}: resume incomplete {s:?}");
        let total = s.total_cells;
        ensure!(
            second.query_count() == total - k,
            "k={k}: resume issued {} queries, expected {}",
            second.query_count(),
            total - k
        );
        let got = outputs(&run_dir)?;
        ensure!(got.metrics_csv == reference.metrics_csv, "k={k}: metrics CSV differs");
        ensure!(got.compliance_csv == reference.compliance_csv, "k={k}: compliance CSV differs");
        ensure!(got.tradeoff_csv == reference.tradeoff_csv, "k={k}: tradeoff CSV differs");
        ensure!(
            got.manifest_json == reference.manifest_json,
            "k={k}: manifest differs:\n{}\nvs\n{}",
            got.manifest_json,
            reference.manifest_json
        );
    }
    Ok(())
}

fn criterion_5() -> Outcome {
    // A stub that answers malformed on every fifth unit.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let responder = Arc::new(|req: &StubRequest, _seen| {
        let n = unit_number(req);
        StubReply::Text(match n % 10 {
            0 => "No idea, sorry.".into(),
            5 => "{\"response\": 7}".into(),
            _ => format!("{{\"response\": {}}}", toy_gold(n)),
        })
    });
    let server = stub(responder);
    let config = RunConfig {
        models: vec![model("Alpha", ALPHA_TAG, server.url())],
        styles: vec![PromptStyle::Standard],
        approaches: vec![LearningApproach::ZeroShot],
        ..toy_config(dir.path(), server.url())
    };
    let run_dir = dir.path().join("run");
    start_run(&config, &run_dir, fixed_options(None)).map_err(|e| e.to_string())?;
    let docs = build_reports(&run_dir, None, false).map_err(|e| e.to_string())?;
    let item = &docs.evaluation.configs[0].items[0];
    ensure!(item.compliance_rate == Some(0.8), "compliance rate {:?}", item.compliance_rate);
    ensure!(
        docs.compliance_csv.contains(",positivity,20,4,0.800,2,0,2,0\n"),
        "compliance CSV:\n{}",
        docs.compliance_csv
    );

    // Hand-built case: 10 units, two non-compliant answers.
    let cb = codebook("sentiment");
    let item = cb.item("positivity").ok_or("item missing")?;
    let mut csv = String::from("unit_id,text,positivity\n");
    for n in 1..=10 {
        csv.push_str(&format!("u{n:02},Statement {n},{}\n", i64::from(n <= 5)));
    }
    let truth = GroundTruthDataset::from_csv("sentiment", &cb, csv.as_bytes()).map_err(|e| e.to_string())?;
    let answers = [Some(1), Some(1), Some(1), Some(0), None, Some(0), Some(0), Some(0), Some(1), None];
    let parsed: BTreeMap<String, ParsedAnnotation> = answers
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let p = match a {
                Some(v) => ParsedAnnotation::Value(Label::Int(*v)),
                None => ParsedAnnotation::NonCompliant(NonCompliance::NoJsonFound),
            };
            (format!("u{:02}", i + 1), p)
        })
        .collect();
    let eval = |policy| {
        evaluate_item(item, &truth, &parsed, &EvaluationScope { units: None, policy }).map_err(|e| e.to_string())
    };
    let exclude = eval(NonCompliancePolicy::Exclude)?;
    let penalize = eval(NonCompliancePolicy::Penalize)?;
    let expect = |name: &str, got: Option<f64>, want: f64| -> Outcome {
        ensure!(close(got, Some(want)), "{name}: {got:?}, expected {want}");
        Ok(())
    };
    expect("exclude compliance", exclude.compliance_rate, 0.8)?;
    expect("exclude accuracy", exclude.accuracy, 0.75)?;
    expect("exclude precision", exclude.macro_precision, 0.75)?;
    expect("exclude recall", exclude.macro_recall, 0.75)?;
    expect("exclude f1", exclude.macro_f1, 0.75)?;
    expect("exclude kappa", exclude.cohen_kappa, 0.5)?;
    ensure!(exclude.n_evaluated == 8, "exclude evaluated {}", exclude.n_evaluated);
    expect("penalize compliance", penalize.compliance_rate, 0.8)?;
    expect("penalize accuracy", penalize.accuracy, 0.6)?;
    expect("penalize precision", penalize.macro_precision, 0.75)?;
    expect("penalize recall", penalize.macro_recall, 0.6)?;
    expect("penalize f1", penalize.macro_f1, 2.0 / 3.0)?;
    expect("penalize kappa", penalize.cohen_kappa, 1.0 / 3.0)?;
    ensure!(penalize.n_evaluated == 10, "penalize evaluated {}", penalize.n_evaluated);
    Ok(())
}

fn psych_text(n: usize) -> String {
    format!("Synthetic statement {n:02} on regional environmental change.")
}

fn psych_number(req: &StubRequest) -> usize {
    let text = req.unit_text().expect("prompt carries a unit text");
    text["Synthetic statement ".len()..][..2].parse().expect("unit number")
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let gold_presence = |n: usize| matches!(n % 5, 0 | 2);
    let gold_specific = |n: usize| n % 2 == 0;
    let mut csv = String::from("unit_id,text,presence,specificity,proximity\n");
    for n in 1..=30 {
        let (presence, specificity, proximity) = if !gold_presence(n) {
            ("0", "", "")
        } else if gold_specific(n) {
            ("1", "Specific", if n % 4 == 0 { "Proximate" } else { "Distant" })
        } else {
            ("1", "Universal", "")
        };
        csv.push_str(&format!("p{n:02},{},{presence},{specificity},{proximity}\n", psych_text(n)));
    }
    let truth_path = dir.path().join("psych.csv");
    std::fs::write(&truth_path, csv).map_err(|e| e.to_string())?;

    // The model also says yes on units the gold marks as absent.
    let server = stub(Arc::new(|req: &StubRequest, _seen| {
        let n = psych_number(req);
        let p = req.prompt();
        StubReply::Text(if p.contains("\nRespond with Specific, or Universal\n") {
            format!("{{\"response\": \"{}\"}}", if n % 3 == 0 { "Specific" } else { "Universal" })
        } else if p.contains("\nRespond with Proximate, or Distant\n") {
            "{\"response\": \"Distant\"}".into()
        } else {
            format!("{{\"response\": {}}}", i64::from(n % 5 <= 2))
        })
    }));
    let config = RunConfig {
        tasks: vec![TaskSpec {
            id: "psych-dist".into(),
            codebook: codebook_path("psych-dist"),
            ground_truth: truth_path,
        }],
        models: vec![model("Alpha", ALPHA_TAG, server.url())],
        styles: vec![PromptStyle::Standard],
        approaches: vec![LearningApproach::ZeroShot],
        ..toy_config(dir.path(), server.url())
    };
    let run_dir = dir.path().join("run");
    start_run(&config, &run_dir, fixed_options(None)).map_err(|e| e.to_string())?;

    let gold_yes = (1..=30).filter(|&n| gold_presence(n)).count();
    let gold_specific_count = (1..=30).filter(|&n| gold_presence(n) && gold_specific(n)).count();
    let queried = |needle: &str| -> BTreeSet<usize> {
        server
            .requests()
            .iter()
            .filter(|r| r.prompt().contains(needle))
            .map(psych_number)
            .collect()
    };
    let spec_units = queried("\nRespond with Specific, or Universal\n");
    let expected: BTreeSet<usize> = (1..=30).filter(|&n| gold_presence(n)).collect();
    ensure!(spec_units == expected, "specificity queried on {spec_units:?}");

    let evaluation = evaluate_run(&run_dir, &EvaluationOptions::default()).map_err(|e| e.to_string())?;
    let items = &evaluation.configs[0].items;
    let get = |id: &str| items.iter().find(|r| r.item_id == id).ok_or(format!("no report for {id}"));
    let spec = get("specificity")?;
    let total = spec.confusion.as_ref().map_or(0, |m| m.total());
    ensure!(total as usize == gold_yes, "specificity matrix total {total}, gold Presence=Yes count {gold_yes}");
    let prox = get("proximity")?;
    let total = prox.confusion.as_ref().map_or(0, |m| m.total());
    ensure!(
        total as usize == gold_specific_count,
        "proximity matrix total {total}, gold Specific count {gold_specific_count}"
    );
    Ok(())
}

fn criterion_7() -> Outcome {
    const CARD_TEMP: f64 = 0.3;
    for protocol in [Protocol::Generate, Protocol::Chat] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let server = stub(Arc::new(|req: &StubRequest, _seen| {
            if req.sampling() != (Some(CARD_TEMP), Some(40), Some(0.9)) {
                return StubReply::Status(400);
            }
            StubReply::Text(format!("{{\"response\": {}}}", toy_gold(unit_number(req))))
        }));
        let mut m = model("Alpha", ALPHA_TAG, server.url());
        m.sampling = SamplingCard {
            temperature: Some(CARD_TEMP),
            top_k: None,
            top_p: None,
        };
        m.endpoint.protocol = protocol;
        let config = RunConfig {
            models: vec![m],
            styles: vec![PromptStyle::Standard],
            approaches: vec![LearningApproach::ZeroShot],
            ..toy_config(dir.path(), server.url())
        };
        let run_dir = dir.path().join("run");
        let s = start_run(&config, &run_dir, fixed_options(None)).map_err(|e| e.to_string())?;
        ensure!(s.failed == 0 && s.succeeded == 20, "{protocol:?}: {s:?}");
        let completions: Vec<StubRequest> = server
            .requests()
            .into_iter()
            .filter(|r| r.path == "/api/generate" || r.path == "/v1/chat/completions")
            .collect();
        ensure!(
            completions.iter().all(|r| r.is_chat() == (protocol == Protocol::Chat)),
            "{protocol:?}: wrong endpoint used"
        );
        for r in &completions {
            ensure!(
                r.sampling() == (Some(CARD_TEMP), Some(40), Some(0.9)),
                "{protocol:?}: wire sampling {:?}",
                r.sampling()
            );
        }
        let docs = build_reports(&run_dir, None, false).map_err(|e| e.to_string())?;
        let sampling = docs.manifest.sampling.as_ref().ok_or("sampling section missing")?;
        ensure!(
            sampling[0].temperature.source == ParamSource::ModelCard
                && sampling[0].top_k.source == ParamSource::BackendDefault
                && sampling[0].top_p.source == ParamSource::BackendDefault,
            "{protocol:?}: provenance {:?}",
            sampling[0]
        );
    }
    Ok(())
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            std::fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

fn missing_after(run_dir: &Path) -> Result<Vec<String>, String> {
    let docs = build_reports(run_dir, None, false).map_err(|e| e.to_string())?;
    match validate_manifest(&docs.manifest) {
        Ok(()) => Ok(Vec::new()),
        Err(ReportError::ManifestIncomplete(missing)) => Ok(missing),
        Err(e) => Err(e.to_string()),
    }
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let metered = Metered::new();
    let server = stub(metered.responder(toy_responder()));
    let config = toy_config(dir.path(), server.url());
    let complete = dir.path().join("complete");
    start_run(&config, &complete, metered.options(None)).map_err(|e| e.to_string())?;
    let missing = missing_after(&complete)?;
    ensure!(missing.is_empty(), "complete run reported missing {missing:?}");

    type Edit = fn(&mut serde_json::Value);
    let edits: [(&str, Edit); 6] = [
        ("model identity", |h| h["config"]["models"][0]["parameter_count"] = 0.into()),
        ("quantisation", |h| h["config"]["models"][1]["quantisation"] = "".into()),
        ("prompt text", |h| {
            for t in h["templates"].as_array_mut().unwrap() {
                t["template"] = "".into();
            }
        }),
        ("sampling hyperparameters", |h| h["sampling"] = serde_json::json!([])),
        ("learning approach", |h| {
            for t in h["templates"].as_array_mut().unwrap() {
                t["approach"] = "unrecorded".into();
            }
        }),
        ("hardware specification", |h| h["config"]["hardware"] = serde_json::Value::Null),
    ];
    for (i, (section, edit)) in edits.iter().enumerate() {
        let run_dir = dir.path().join(format!("edited-{i}"));
        copy_dir(&complete, &run_dir).map_err(|e| e.to_string())?;
        let path = run_dir.join("run.json");
        let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
        let mut header: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        edit(&mut header);
        std::fs::write(&path, serde_json::to_string_pretty(&header).unwrap()).map_err(|e| e.to_string())?;
        let missing = missing_after(&run_dir)?;
        ensure!(missing == [section.to_string()], "without {section}: missing {missing:?}");
    }

    // A run without an energy meter has no efficiency section.
    let unmetered = dir.path().join("unmetered");
    let config = RunConfig {
        energy: EnergyConfig::Null,
        ..config
    };
    start_run(&config, &unmetered, fixed_options(None)).map_err(|e| e.to_string())?;
    let missing = missing_after(&unmetered)?;
    ensure!(missing == ["efficiency metrics"], "without energy: missing {missing:?}");
    Ok(())
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let all_styles = vec![PromptStyle::Standard, PromptStyle::persona(), PromptStyle::chain_of_thought()];
    let task_b = TaskSpec {
        id: "sentiment-b".into(),
        ..toy_task(dir.path())
    };
    let models3 = vec![
        model("Alpha", ALPHA_TAG, "http://127.0.0.1:9"),
        model("Beta", BETA_TAG, "http://127.0.0.1:9"),
        model("Gamma", "gamma:3b", "http://127.0.0.1:9"),
    ];
    // (models, tasks, styles, approaches, repeats)
    let shapes: Vec<(usize, Vec<TaskSpec>, Vec<PromptStyle>, Vec<LearningApproach>, u32)> = vec![
        (2, vec![toy_task(dir.path())], all_styles.clone(), vec![LearningApproach::ZeroShot, LearningApproach::few_shot()], 1),
        (
            3,
            vec![toy_task(dir.path()), task_b],
            vec![PromptStyle::Standard, PromptStyle::persona()],
            vec![
                LearningApproach::ZeroShot,
                LearningApproach::few_shot(),
                LearningApproach::FewShot { max_examples: Some(2) },
            ],
            1,
        ),
        (1, vec![toy_task(dir.path())], all_styles, vec![LearningApproach::ZeroShot], 2),
    ];
    for (i, (n_models, tasks, styles, approaches, repeats)) in shapes.into_iter().enumerate() {
        let base = toy_config(dir.path(), "http://127.0.0.1:9");
        let config = RunConfig {
            tasks,
            models: models3[..n_models].to_vec(),
            styles,
            approaches,
            crossing_rules: vec![CrossingRule::Preset(RulePreset::StyleVariantsImplyFewShot)],
            repeats,
            ..base
        };
        // The rule is declared in the serialized grid and survives a round trip.
        let json = serde_json::to_string(&config).map_err(|e| e.to_string())?;
        ensure!(json.contains("\"style_variants_imply_few_shot\""), "rule not serialized: {json}");
        let config = RunConfig::from_json(&json).map_err(|e| e.to_string())?;

        let (m, t, s, r) = (
            config.models.len(),
            config.tasks.len(),
            config.styles.len(),
            config.repeats as usize,
        );
        let a = config.approaches.len();
        let f = config
            .approaches
            .iter()
            .filter(|x| matches!(x, LearningApproach::FewShot { .. }))
            .count();
        let closed_form = m * t * (a + (s - 1) * f) * r;
        let grid = ExperimentGrid::load(&config).map_err(|e| e.to_string())?;
        let got = expand_grid(&grid).map_err(|e| e.to_string())?.configurations.len();
        ensure!(got == closed_form, "shape {i}: {got} configurations, closed form {closed_form}");
        let expected = [8, 30, 2][i];
        ensure!(got == expected, "shape {i}: {got} configurations, expected {expected}");
    }
    Ok(())
}

/// Model-choice results table: Model, Task, F1, Accuracy, Precision,
/// Recall, kappa, alpha at three decimals.
const MODEL_CHOICE_TABLE: [(&str, &str, [f64; 6]); 8] = [
    ("DeepSeek-R1", "approval", [0.357, 0.414, 0.476, 0.355, 0.225, 0.538]),
    ("DeepSeek-R1", "psych-dist", [0.393, 0.948, 0.415, 0.376, 0.643, 0.656]),
    ("DeepSeek-R1", "sentiment", [0.735, 0.743, 0.732, 0.741, 0.471, 0.470]),
    ("DeepSeek-R1", "topic-8", [0.234, 0.496, 0.282, 0.248, 0.378, 0.385]),
    ("GPT-OSS", "approval", [0.427, 0.477, 0.481, 0.418, 0.285, 0.571]),
    ("GPT-OSS", "psych-dist", [0.699, 0.935, 0.726, 0.681, 0.547, 0.564]),
    ("GPT-OSS", "sentiment", [0.700, 0.719, 0.703, 0.698, 0.400, 0.401]),
    ("GPT-OSS", "topic-8", [0.359, 0.496, 0.416, 0.391, 0.385, 0.447]),
];

fn criterion_10() -> Outcome {
    let golden = "\
Model,Task,F1,Accuracy,Precision,Recall,kappa,alpha
DeepSeek-R1,approval,0.357,0.414,0.476,0.355,0.225,0.538
DeepSeek-R1,psych-dist,0.393,0.948,0.415,0.376,0.643,0.656
DeepSeek-R1,sentiment,0.735,0.743,0.732,0.741,0.471,0.470
DeepSeek-R1,topic-8,0.234,0.496,0.282,0.248,0.378,0.385
GPT-OSS,approval,0.427,0.477,0.481,0.418,0.285,0.571
GPT-OSS,psych-dist,0.699,0.935,0.726,0.681,0.547,0.564
GPT-OSS,sentiment,0.700,0.719,0.703,0.698,0.400,0.401
GPT-OSS,topic-8,0.359,0.496,0.416,0.391,0.385,0.447
";
    // Unrounded values within half a unit of the last printed digit.
    let jitter = [0.00049, -0.00049, 0.0002, -0.0003, 0.0, 0.00041];
    let rows: Vec<MetricsRow> = MODEL_CHOICE_TABLE
        .iter()
        .map(|(model, task, v)| {
            let v: Vec<Option<f64>> = v.iter().zip(jitter).map(|(x, j)| Some(x + j)).collect();
            MetricsRow {
                model: (*model).into(),
                approach: "Zero-Shot".into(),
                style: "standard".into(),
                repeat: 1,
                task: (*task).into(),
                annotation_type: if *task == "approval" {
                    AnnotationType::Likert
                } else {
                    AnnotationType::Binary
                },
                f1: v[0],
                accuracy: v[1],
                precision: v[2],
                recall: v[3],
                kappa: v[4],
                alpha: v[5],
                qwk: None,
                rho: None,
                n_total: 100,
                n_evaluated: 100,
                n_noncompliant: 0,
                compliance_rate: Some(1.0),
            }
        })
        .collect();
    let csv = emit_metrics_table(&rows, TableFormat::Csv);
    ensure!(csv == golden, "table differs:\n{csv}");
    Ok(())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("metric oracle suite", criterion_1),
        ("golden prompts", criterion_2),
        ("end-to-end stub run", criterion_3),
        ("resume idempotence", criterion_4),
        ("compliance accounting", criterion_5),
        ("nested gating", criterion_6),
        ("sampling defaults", criterion_7),
        ("manifest gate", criterion_8),
        ("crossing rule", criterion_9),
        ("results table format", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let label = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.ends_with(&format!(" {f}")) || name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| (*s).to_owned()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => println!("{label}: PASS - {name} ({secs:.2}s)"),
            Err(e) => {
                failures += 1;
                println!("{label}: FAIL - {name} ({secs:.2}s): {e}");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
