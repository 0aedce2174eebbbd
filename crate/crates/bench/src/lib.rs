//! Seeded workloads shared by the benchmarks.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use annobench::codebook::{load_codebook, Codebook, Label};

pub fn fixture_codebook(id: &str) -> Codebook {
    let path: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures/codebooks")
        .join(format!("{id}.json"));
    load_codebook(path).expect("fixture codebook loads")
}

/// `n` (gold, predicted) pairs over `k` classes; about 70% agree.
pub fn label_pairs(n: usize, k: i64, seed: u64) -> Vec<(Label, Label)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let g = rng.random_range(0..k);
            let p = if rng.random_bool(0.7) { g } else { rng.random_range(0..k) };
            (Label::Int(g), Label::Int(p))
        })
        .collect()
}

/// Model outputs in the shapes seen in practice: bare JSON, chatter around
/// JSON, fenced blocks, reasoning traces and no JSON at all.
pub fn noisy_outputs(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let v = rng.random_range(1..=5);
            let filler = "The excerpt mentions hiring, wages and output. ".repeat(rng.random_range(0..20));
            match i % 5 {
                0 => format!("{{\"response\": {v}}}"),
                1 => format!("{filler}So my answer is {{\"response\": {v}}}."),
                2 => format!("```json\n{{\"response\": \"{v}\"}}\n```"),
                3 => format!("<think>{filler}{{\"response\": {}}} no wait</think>\n{{\"response\": {v}}}", 6 - v),
                _ => format!("{filler}I would rate this a {v}."),
            }
        })
        .collect()
}

/// Unit texts of a few hundred characters.
pub fn unit_texts(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let words = rng.random_range(20..80);
            let body: Vec<&str> = (0..words)
                .map(|_| ["growth", "rates", "the", "fell", "markets", "jobs", "rose", "inflation"][rng.random_range(0..8)])
                .collect();
            format!("Unit {i}: {}.", body.join(" "))
        })
        .collect()
}
