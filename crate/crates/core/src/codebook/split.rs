use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CodebookError, GroundTruthDataset, ResolvedValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Validation, Partition::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self, CodebookError> {
        let r = SplitRatios {
            train,
            validation,
            test,
        };
        r.check()?;
        Ok(r)
    }

    pub fn check(&self) -> Result<(), CodebookError> {
        let parts = self.as_array();
        if parts.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(CodebookError::InvalidRatios(format!(
                "every ratio must be positive, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CodebookError::InvalidRatios(format!(
                "ratios must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }
}

/// Deterministic train/validation/test assignment of a dataset's units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSplit {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub assignment: BTreeMap<String, Partition>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl DataSplit {
    pub fn partition_of(&self, unit_id: &str) -> Option<Partition> {
        self.assignment.get(unit_id).copied()
    }

    pub fn units_in(&self, partition: Partition) -> impl Iterator<Item = &str> {
        self.assignment
            .iter()
            .filter(move |(_, p)| **p == partition)
            .map(|(u, _)| u.as_str())
    }

    pub fn count(&self, partition: Partition) -> usize {
        self.units_in(partition).count()
    }
}

const POOLED: &str = "~pooled";

fn stratum_key(value: Option<&ResolvedValue>) -> String {
    match value {
        Some(ResolvedValue::Value(v)) => format!("value:{v}"),
        Some(ResolvedValue::NotApplicable) => "not_applicable".into(),
        Some(ResolvedValue::Unresolved) | None => "unresolved".into(),
    }
}

/// Splits units into train/validation/test, stratified by the root item's
/// resolved label.
///
/// Overall partition sizes follow largest-remainder apportionment of
/// `n × ratio`; within each stratum every partition receives
/// `floor(n_s × ratio)` or one more. Strata smaller than the number of
/// partitions are pooled and split unstratified (a warning is recorded).
pub fn make_splits(
    dataset: &GroundTruthDataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DataSplit, CodebookError> {
    ratios.check()?;
    if dataset.units.is_empty() {
        return Err(CodebookError::EmptyDataset);
    }
    let root = dataset.item_ids.first().map(String::as_str).unwrap_or("");
    let mut strata: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for unit in &dataset.units {
        let key = stratum_key(dataset.resolved_value(&unit.id, root));
        strata.entry(key).or_default().push(unit.id.clone());
    }

    let mut warnings = Vec::new();
    let mut pooled = Vec::new();
    strata.retain(|key, units| {
        if units.len() < Partition::ALL.len() {
            let msg = format!(
                "stratum `{key}` has {} unit(s), fewer than {} partitions; split unstratified",
                units.len(),
                Partition::ALL.len()
            );
            tracing::warn!("{msg}");
            warnings.push(msg);
            pooled.append(units);
            false
        } else {
            true
        }
    });
    let mut strata: Vec<(String, Vec<String>)> = strata.into_iter().collect();
    if !pooled.is_empty() {
        strata.push((POOLED.to_owned(), pooled));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, units) in &mut strata {
        units.shuffle(&mut rng);
    }

    let r = ratios.as_array();
    let n = dataset.units.len();
    let targets = largest_remainder(n, &r);

    // Per-stratum floors, then hand out the leftover units so that both the
    // stratum sizes and the overall targets are met exactly.
    let mut counts: Vec<[usize; 3]> = Vec::with_capacity(strata.len());
    let mut fracs: Vec<[f64; 3]> = Vec::with_capacity(strata.len());
    for (_, units) in &strata {
        let mut c = [0usize; 3];
        let mut f = [0f64; 3];
        for p in 0..3 {
            let exact = units.len() as f64 * r[p];
            let fl = (exact + 1e-9).floor();
            c[p] = fl as usize;
            f[p] = (exact - fl).max(0.0);
        }
        counts.push(c);
        fracs.push(f);
    }
    let mut need: [i64; 3] = [0; 3];
    for p in 0..3 {
        need[p] = targets[p] as i64 - counts.iter().map(|c| c[p] as i64).sum::<i64>();
    }
    let mut order: Vec<usize> = (0..strata.len()).collect();
    let leftover = |s: usize, counts: &[[usize; 3]]| strata[s].1.len() - counts[s].iter().sum::<usize>();
    order.sort_by_key(|&s| std::cmp::Reverse(leftover(s, &counts)));
    for s in order {
        let extra = leftover(s, &counts);
        let mut parts = [0usize, 1, 2];
        parts.sort_by(|&a, &b| {
            (need[b] > 0)
                .cmp(&(need[a] > 0))
                .then(need[b].cmp(&need[a]))
                .then(fracs[s][b].total_cmp(&fracs[s][a]))
                .then(a.cmp(&b))
        });
        for &p in parts.iter().take(extra) {
            counts[s][p] += 1;
            need[p] -= 1;
        }
    }

    let mut assignment = BTreeMap::new();
    for ((_, units), c) in strata.iter().zip(&counts) {
        let mut it = units.iter();
        for (p, &k) in Partition::ALL.iter().zip(c) {
            for unit in it.by_ref().take(k) {
                assignment.insert(unit.clone(), *p);
            }
        }
        debug_assert!(it.next().is_none());
    }

    Ok(DataSplit {
        seed,
        ratios,
        assignment,
        warnings,
    })
}

fn largest_remainder(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let mut out = [0usize; 3];
    let mut rema = [(0f64, 0usize); 3];
    for p in 0..3 {
        let exact = n as f64 * ratios[p];
        let fl = (exact + 1e-9).floor();
        out[p] = fl as usize;
        rema[p] = (exact - fl, p);
    }
    let mut left = n - out.iter().sum::<usize>();
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, p) in rema.iter() {
        if left == 0 {
            break;
        }
        out[p] += 1;
        left -= 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{Codebook, Label, Unit};

    fn binary_book() -> Codebook {
        Codebook::from_json(
            r#"{"schema_version":1,"id":"s","title":"S","sections":[{"name":"S","instructions":"I","items":[
            {"id":"y","name":"Y","tooltip":"q","kind":{"type":"binary"}}]}]}"#,
        )
        .unwrap()
    }

    fn dataset(labels: &[i64]) -> GroundTruthDataset {
        let book = binary_book();
        let units = (0..labels.len())
            .map(|i| Unit {
                id: format!("u{i:04}"),
                text: format!("text {i}"),
            })
            .collect();
        let ann = labels
            .iter()
            .enumerate()
            .map(|(i, l)| ((format!("u{i:04}"), "y".into(), "_".into()), Label::Int(*l)))
            .collect();
        GroundTruthDataset::from_annotations("s", &book, units, ann).unwrap()
    }

    #[test]
    fn exact_ratio_on_divisible_n() {
        let labels: Vec<i64> = (0..100).map(|i| (i % 3 == 0) as i64).collect();
        let ds = dataset(&labels);
        let ratios = SplitRatios::new(0.6, 0.2, 0.2).unwrap();
        let split = make_splits(&ds, ratios, 7).unwrap();
        assert_eq!(split.count(Partition::Train), 60);
        assert_eq!(split.count(Partition::Validation), 20);
        assert_eq!(split.count(Partition::Test), 20);
        assert_eq!(split.assignment.len(), 100);
        assert_eq!(make_splits(&ds, ratios, 7).unwrap(), split);
        assert_ne!(make_splits(&ds, ratios, 8).unwrap().assignment, split.assignment);
    }

    #[test]
    fn rejects_bad_ratios_and_empty() {
        assert!(SplitRatios::new(0.5, 0.5, 0.0).is_err());
        assert!(SplitRatios::new(0.5, 0.3, 0.3).is_err());
        let ds = dataset(&[]);
        let r = SplitRatios::new(0.6, 0.2, 0.2).unwrap();
        assert!(matches!(make_splits(&ds, r, 1), Err(CodebookError::EmptyDataset)));
    }

    #[test]
    fn tiny_stratum_is_pooled_with_warning() {
        let mut labels = vec![0i64; 30];
        labels[4] = 1;
        let ds = dataset(&labels);
        let split = make_splits(&ds, SplitRatios::new(0.5, 0.25, 0.25).unwrap(), 3).unwrap();
        assert_eq!(split.warnings.len(), 1);
        assert!(split.warnings[0].contains("value:1"));
        assert_eq!(split.assignment.len(), 30);
    }

    #[test]
    fn largest_remainder_sums_to_n() {
        for n in 1..200 {
            let t = largest_remainder(n, &[0.5, 0.25, 0.25]);
            assert_eq!(t.iter().sum::<usize>(), n);
            let t = largest_remainder(n, &[0.7, 0.2, 0.1]);
            assert_eq!(t.iter().sum::<usize>(), n);
        }
    }
}
