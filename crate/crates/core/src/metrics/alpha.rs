use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaLevel {
    Nominal,
    Ordinal,
    Interval,
}

/// Krippendorff's alpha via the coincidence matrix.
///
/// `units` holds the values each unit received (missing values simply
/// omitted). Units with fewer than two values are not pairable. Returns
/// `None` when nothing is pairable or the expected disagreement is zero.
pub fn krippendorff_alpha(units: &[Vec<f64>], level: AlphaLevel) -> Option<f64> {
    let mut values: Vec<f64> = units
        .iter()
        .filter(|u| u.len() >= 2)
        .flatten()
        .copied()
        .collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let v = values.len();
    if v == 0 {
        return None;
    }
    let idx = |x: f64| values.binary_search_by(|p| p.total_cmp(&x)).expect("value indexed");

    let mut coincidence = vec![vec![0.0f64; v]; v];
    for unit in units.iter().filter(|u| u.len() >= 2) {
        let mut counts = vec![0usize; v];
        for &x in unit {
            counts[idx(x)] += 1;
        }
        let weight = 1.0 / (unit.len() - 1) as f64;
        for c in 0..v {
            if counts[c] == 0 {
                continue;
            }
            for k in 0..v {
                let pairs = if c == k {
                    counts[c] * (counts[c] - 1)
                } else {
                    counts[c] * counts[k]
                };
                coincidence[c][k] += pairs as f64 * weight;
            }
        }
    }
    let margins: Vec<f64> = coincidence.iter().map(|r| r.iter().sum()).collect();
    let n: f64 = margins.iter().sum();

    let delta = |c: usize, k: usize| -> f64 {
        match level {
            AlphaLevel::Nominal => (c != k) as u8 as f64,
            AlphaLevel::Interval => (values[c] - values[k]).powi(2),
            AlphaLevel::Ordinal => {
                let (lo, hi) = if c <= k { (c, k) } else { (k, c) };
                let between: f64 = margins[lo..=hi].iter().sum();
                (between - (margins[c] + margins[k]) / 2.0).powi(2)
            }
        }
    };

    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..v {
        for k in 0..v {
            let d = delta(c, k);
            observed += coincidence[c][k] * d;
            expected += margins[c] * margins[k] * d;
        }
    }
    if expected == 0.0 {
        return None;
    }
    Some(1.0 - (n - 1.0) * observed / expected)
}

/// Alpha for two coders given as (first, second) value pairs.
pub fn krippendorff_alpha_pairs(pairs: &[(f64, f64)], level: AlphaLevel) -> Option<f64> {
    let units: Vec<Vec<f64>> = pairs.iter().map(|&(a, b)| vec![a, b]).collect();
    krippendorff_alpha(&units, level)
}
