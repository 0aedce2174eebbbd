use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotationItem, Codebook, CodebookError, ItemKind, Label};

/// Coder id used for a ground-truth column that carries no coder suffix.
pub const SINGLE_CODER: &str = "_";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unit {
    pub id: String,
    pub text: String,
}

/// Outcome of resolving the coders' values for one unit × item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum ResolvedValue {
    Value(Label),
    /// The item's parent did not resolve to the required value.
    NotApplicable,
    /// Majority tie, or no coder supplied a value.
    Unresolved,
}

impl ResolvedValue {
    pub fn value(&self) -> Option<&Label> {
        match self {
            ResolvedValue::Value(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Majority {
    Value(Label),
    Unresolved,
}

/// Returns the strictly most frequent value, or `Unresolved` on a tie.
pub fn resolve_majority(values: &[Label]) -> Majority {
    let mut counts: BTreeMap<&Label, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let Some(best) = counts.values().copied().max() else {
        return Majority::Unresolved;
    };
    let mut winners = counts.iter().filter(|(_, &c)| c == best);
    match (winners.next(), winners.next()) {
        (Some((label, _)), None) => Majority::Value((*label).clone()),
        _ => Majority::Unresolved,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Dichotomized {
    Negative,
    Positive,
    Discard,
}

impl Dichotomized {
    /// Binary label (0 = negative, 1 = positive); `None` for discarded units.
    pub fn label(self) -> Option<Label> {
        match self {
            Dichotomized::Negative => Some(Label::Int(0)),
            Dichotomized::Positive => Some(Label::Int(1)),
            Dichotomized::Discard => None,
        }
    }
}

/// Collapses a mean rating on the 1..=9 scale into a binary class.
///
/// Means in the open interval (4, 6) are discarded.
pub fn dichotomize_ordinal(mean_score: f64) -> Result<Dichotomized, CodebookError> {
    if !(1.0..=9.0).contains(&mean_score) {
        return Err(CodebookError::ScoreOutOfRange(mean_score));
    }
    Ok(if mean_score <= 4.0 {
        Dichotomized::Negative
    } else if mean_score >= 6.0 {
        Dichotomized::Positive
    } else {
        Dichotomized::Discard
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthDataset {
    pub task_id: String,
    pub units: Vec<Unit>,
    /// Item ids of the task's codebook, in document order.
    pub item_ids: Vec<String>,
    /// (unit_id, item_id, coder_id) → value.
    #[serde(with = "triple_keyed")]
    pub coder_annotations: BTreeMap<(String, String, String), Label>,
    /// (unit_id, item_id) → resolved value.
    #[serde(with = "pair_keyed")]
    pub resolved: BTreeMap<(String, String), ResolvedValue>,
}

impl GroundTruthDataset {
    /// Builds a dataset from raw coder values and resolves it against the
    /// codebook (majority per item, nesting applied in document order).
    pub fn from_annotations(
        task_id: impl Into<String>,
        codebook: &Codebook,
        units: Vec<Unit>,
        coder_annotations: BTreeMap<(String, String, String), Label>,
    ) -> Result<Self, CodebookError> {
        let mut seen = std::collections::HashSet::new();
        for u in &units {
            if !seen.insert(u.id.as_str()) {
                return Err(CodebookError::GroundTruth(format!(
                    "duplicate unit_id `{}`",
                    u.id
                )));
            }
        }
        for ((unit, item, coder), label) in &coder_annotations {
            let it = codebook
                .item(item)
                .ok_or_else(|| CodebookError::UnknownItem(item.clone()))?;
            if !it.kind.is_valid(label) {
                return Err(CodebookError::GroundTruth(format!(
                    "unit `{unit}`, item `{item}`, coder `{coder}`: `{label}` is not a valid value"
                )));
            }
            if !seen.contains(unit.as_str()) {
                return Err(CodebookError::GroundTruth(format!(
                    "annotation for unknown unit `{unit}`"
                )));
            }
        }

        let mut by_cell: HashMap<(&str, &str), Vec<Label>> = HashMap::new();
        for ((unit, item, _), label) in &coder_annotations {
            by_cell
                .entry((unit.as_str(), item.as_str()))
                .or_default()
                .push(label.clone());
        }

        let mut resolved = BTreeMap::new();
        for unit in &units {
            for item in codebook.items() {
                let gate_open = match &item.dependency {
                    None => true,
                    Some(dep) => {
                        let parent = resolved.get(&(unit.id.clone(), dep.parent_item_id.clone()));
                        matches!(parent, Some(ResolvedValue::Value(v)) if *v == dep.required_parent_value)
                    }
                };
                let value = if !gate_open {
                    ResolvedValue::NotApplicable
                } else {
                    let values = by_cell
                        .get(&(unit.id.as_str(), item.id.as_str()))
                        .map(Vec::as_slice)
                        .unwrap_or(&[]);
                    match resolve_majority(values) {
                        Majority::Value(v) => ResolvedValue::Value(v),
                        Majority::Unresolved => ResolvedValue::Unresolved,
                    }
                };
                resolved.insert((unit.id.clone(), item.id.clone()), value);
            }
        }

        Ok(GroundTruthDataset {
            task_id: task_id.into(),
            units,
            item_ids: codebook.items().map(|i| i.id.clone()).collect(),
            coder_annotations,
            resolved,
        })
    }

    /// Builds a single-item binary dataset from mean ordinal ratings,
    /// dropping units whose mean falls in the discard band.
    pub fn from_ordinal_means(
        task_id: impl Into<String>,
        codebook: &Codebook,
        item_id: &str,
        rows: &[(String, String, f64)],
    ) -> Result<Self, CodebookError> {
        let mut units = Vec::new();
        let mut annotations = BTreeMap::new();
        for (unit_id, text, mean) in rows {
            if let Some(label) = dichotomize_ordinal(*mean)?.label() {
                units.push(Unit {
                    id: unit_id.clone(),
                    text: text.clone(),
                });
                annotations.insert(
                    (unit_id.clone(), item_id.to_owned(), SINGLE_CODER.to_owned()),
                    label,
                );
            }
        }
        Self::from_annotations(task_id, codebook, units, annotations)
    }

    /// Reads a ground-truth CSV: `unit_id`, `text`, then one column per item
    /// (`item_id`) or per item and coder (`item_id:coder_id`). Empty cells
    /// mean "not annotated".
    pub fn from_csv<R: Read>(
        task_id: impl Into<String>,
        codebook: &Codebook,
        reader: R,
    ) -> Result<Self, CodebookError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| CodebookError::GroundTruth(e.to_string()))?
            .clone();
        let columns = parse_header(codebook, headers.iter())?;
        let mut units = Vec::new();
        let mut annotations = BTreeMap::new();
        for (row_no, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| CodebookError::GroundTruth(e.to_string()))?;
            let cells: Vec<CellValue> = record.iter().map(CellValue::from_csv).collect();
            ingest_row(codebook, &columns, cells, row_no + 1, &mut units, &mut annotations)?;
        }
        Self::from_annotations(task_id, codebook, units, annotations)
    }

    /// Reads the JSON flavour: an array of row objects keyed like the CSV
    /// header. Values may be numbers, strings or null.
    pub fn from_json(
        task_id: impl Into<String>,
        codebook: &Codebook,
        text: &str,
    ) -> Result<Self, CodebookError> {
        let rows: Vec<serde_json::Map<String, serde_json::Value>> = serde_json::from_str(text)?;
        let mut units = Vec::new();
        let mut annotations = BTreeMap::new();
        for (row_no, row) in rows.into_iter().enumerate() {
            let keys: Vec<&str> = row.keys().map(String::as_str).collect();
            let columns = parse_header(codebook, keys.iter().copied())?;
            let cells: Vec<CellValue> = row.values().map(CellValue::from_json).collect();
            ingest_row(codebook, &columns, cells, row_no + 1, &mut units, &mut annotations)?;
        }
        Self::from_annotations(task_id, codebook, units, annotations)
    }

    /// Loads CSV or JSON depending on the file extension.
    pub fn load(
        task_id: impl Into<String>,
        codebook: &Codebook,
        path: impl AsRef<Path>,
    ) -> Result<Self, CodebookError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CodebookError::Io {
            path: path.display().to_string(),
            source,
        })?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(task_id, codebook, &text),
            _ => Self::from_csv(task_id, codebook, text.as_bytes()),
        }
    }

    pub fn unit(&self, unit_id: &str) -> Option<&Unit> {
        self.units.iter().find(|u| u.id == unit_id)
    }

    pub fn resolved_value(&self, unit_id: &str, item_id: &str) -> Option<&ResolvedValue> {
        self.resolved.get(&(unit_id.to_owned(), item_id.to_owned()))
    }

    pub fn content_hash(&self) -> String {
        crate::hash::content_hash(
            serde_json::to_string(self)
                .expect("dataset serializes")
                .as_bytes(),
        )
    }
}

/// Units an item applies to, in dataset order.
///
/// Root items apply to every unit; a nested item applies to the units whose
/// resolved parent value equals the required value.
pub fn applicable_units(
    item: &AnnotationItem,
    truth: &GroundTruthDataset,
) -> Result<Vec<String>, CodebookError> {
    let Some(dep) = &item.dependency else {
        return Ok(truth.units.iter().map(|u| u.id.clone()).collect());
    };
    if !truth.item_ids.contains(&dep.parent_item_id) {
        return Err(CodebookError::UnknownItem(dep.parent_item_id.clone()));
    }
    Ok(truth
        .units
        .iter()
        .filter(|u| {
            truth
                .resolved_value(&u.id, &dep.parent_item_id)
                .and_then(ResolvedValue::value)
                == Some(&dep.required_parent_value)
        })
        .map(|u| u.id.clone())
        .collect())
}

enum Column {
    UnitId,
    Text,
    Annotation { item: String, coder: String },
}

enum CellValue {
    Empty,
    Text(String),
    Number(serde_json::Number),
}

impl CellValue {
    fn from_csv(s: &str) -> Self {
        if s.trim().is_empty() {
            CellValue::Empty
        } else {
            CellValue::Text(s.to_owned())
        }
    }

    fn from_json(v: &serde_json::Value) -> Self {
        match v {
            serde_json::Value::Null => CellValue::Empty,
            serde_json::Value::Number(n) => CellValue::Number(n.clone()),
            serde_json::Value::String(s) if s.trim().is_empty() => CellValue::Empty,
            serde_json::Value::String(s) => CellValue::Text(s.clone()),
            other => CellValue::Text(other.to_string()),
        }
    }

    fn as_text(&self) -> String {
        match self {
            CellValue::Empty => String::new(),
            CellValue::Text(s) => s.clone(),
            CellValue::Number(n) => n.to_string(),
        }
    }
}

fn parse_header<'a>(
    codebook: &Codebook,
    headers: impl Iterator<Item = &'a str>,
) -> Result<Vec<Column>, CodebookError> {
    let mut columns = Vec::new();
    for h in headers {
        let h = h.trim();
        let col = match h {
            "unit_id" => Column::UnitId,
            "text" => Column::Text,
            other => {
                let (item, coder) = other.split_once(':').unwrap_or((other, SINGLE_CODER));
                if codebook.item(item).is_none() {
                    return Err(CodebookError::UnknownItem(item.to_owned()));
                }
                Column::Annotation {
                    item: item.to_owned(),
                    coder: coder.to_owned(),
                }
            }
        };
        columns.push(col);
    }
    if !columns.iter().any(|c| matches!(c, Column::UnitId)) {
        return Err(CodebookError::GroundTruth("missing `unit_id` column".into()));
    }
    if !columns.iter().any(|c| matches!(c, Column::Text)) {
        return Err(CodebookError::GroundTruth("missing `text` column".into()));
    }
    Ok(columns)
}

fn ingest_row(
    codebook: &Codebook,
    columns: &[Column],
    cells: Vec<CellValue>,
    row_no: usize,
    units: &mut Vec<Unit>,
    annotations: &mut BTreeMap<(String, String, String), Label>,
) -> Result<(), CodebookError> {
    let mut unit_id = None;
    let mut text = None;
    let mut values = Vec::new();
    for (col, cell) in columns.iter().zip(cells) {
        match col {
            Column::UnitId => unit_id = Some(cell.as_text()),
            Column::Text => text = Some(cell.as_text()),
            Column::Annotation { item, coder } => {
                if matches!(cell, CellValue::Empty) {
                    continue;
                }
                let kind = &codebook.item(item).expect("checked in header").kind;
                let label = parse_cell(kind, &cell).ok_or_else(|| {
                    CodebookError::GroundTruth(format!(
                        "row {row_no}, column `{item}:{coder}`: invalid value `{}`",
                        cell.as_text()
                    ))
                })?;
                values.push((item.clone(), coder.clone(), label));
            }
        }
    }
    let unit_id = unit_id
        .filter(|u| !u.trim().is_empty())
        .ok_or_else(|| CodebookError::GroundTruth(format!("row {row_no}: empty unit_id")))?;
    let text = text.unwrap_or_default();
    if text.trim().is_empty() {
        return Err(CodebookError::GroundTruth(format!(
            "row {row_no}: empty text for unit `{unit_id}`"
        )));
    }
    for (item, coder, label) in values {
        annotations.insert((unit_id.clone(), item, coder), label);
    }
    units.push(Unit { id: unit_id, text });
    Ok(())
}

fn parse_cell(kind: &ItemKind, cell: &CellValue) -> Option<Label> {
    let raw = match cell {
        CellValue::Empty => return None,
        CellValue::Number(n) => serde_json::Value::Number(n.clone()),
        CellValue::Text(s) => serde_json::Value::String(s.clone()),
    };
    crate::parser::normalize_value(&raw, kind)
}

mod triple_keyed {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        unit_id: String,
        item_id: String,
        coder_id: String,
        value: Label,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<(String, String, String), Label>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter().map(|((u, i, c), v)| Entry {
            unit_id: u.clone(),
            item_id: i.clone(),
            coder_id: c.clone(),
            value: v.clone(),
        }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<(String, String, String), Label>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries
            .into_iter()
            .map(|e| ((e.unit_id, e.item_id, e.coder_id), e.value))
            .collect())
    }
}

mod pair_keyed {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        unit_id: String,
        item_id: String,
        resolved: ResolvedValue,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<(String, String), ResolvedValue>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter().map(|((u, i), v)| Entry {
            unit_id: u.clone(),
            item_id: i.clone(),
            resolved: v.clone(),
        }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<(String, String), ResolvedValue>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries
            .into_iter()
            .map(|e| ((e.unit_id, e.item_id), e.resolved))
            .collect())
    }
}
