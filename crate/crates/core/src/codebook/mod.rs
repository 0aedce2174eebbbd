//! Codebooks: the hierarchical task definitions that are shown identically to
//! human coders and to models.
//!
//! A codebook is a list of sections, each holding one or more annotation
//! items. Items are binary, categorical or Likert questions, carry their
//! worked examples, and may be nested under a parent item (the item only
//! applies when the parent resolved to a given value).

mod split;
mod truth;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::hash::content_hash;

pub use split::{make_splits, DataSplit, Partition, SplitRatios};
pub use truth::{
    applicable_units, dichotomize_ordinal, resolve_majority, Dichotomized, GroundTruthDataset,
    Majority, ResolvedValue, Unit,
};

/// Schema version written by this crate and accepted by [`load_codebook`].
pub const CODEBOOK_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CodebookError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed codebook: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported codebook schema_version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("codebook failed validation:\n{}", render_diagnostics(.0))]
    Validation(Vec<Diagnostic>),
    #[error("malformed ground truth: {0}")]
    GroundTruth(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("cannot split an empty dataset")]
    EmptyDataset,
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("ordinal score {0} outside 1..=9")]
    ScoreOutOfRange(f64),
}

fn render_diagnostics(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| format!("  - {d}")).collect::<Vec<_>>().join("\n")
}

/// One failed validation rule, pinned to the item (or section) that broke it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub location: String,
    pub rule: &'static str,
    pub detail: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.location, self.rule, self.detail)
    }
}

/// An annotation value.
///
/// Binary items use `Int(0)` / `Int(1)`, Likert items use `Int` within the
/// scale, categorical items use `Text` holding one of the declared options.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Int(i64),
    Text(String),
}

impl Label {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            Label::Int(v) => Some(*v),
            Label::Text(_) => None,
        }
    }

    /// JSON rendering used inside `{"response": ...}` envelopes.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Label::Int(v) => serde_json::Value::from(*v),
            Label::Text(s) => serde_json::Value::from(s.as_str()),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Int(v) => write!(f, "{v}"),
            Label::Text(s) => f.write_str(s),
        }
    }
}

impl From<i64> for Label {
    fn from(v: i64) -> Self {
        Label::Int(v)
    }
}

impl From<&str> for Label {
    fn from(v: &str) -> Self {
        Label::Text(v.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub schema_version: u32,
    pub id: String,
    pub title: String,
    pub sections: Vec<Section>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub instructions: String,
    pub items: Vec<AnnotationItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationItem {
    pub id: String,
    pub name: String,
    /// The question text.
    pub tooltip: String,
    pub kind: ItemKind,
    #[serde(default)]
    pub examples: Vec<CodedExample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dependency: Option<Dependency>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ItemKind {
    Binary,
    Categorical {
        options: Vec<String>,
    },
    Likert {
        min: i64,
        max: i64,
        #[serde(default)]
        anchor_text: String,
    },
}

/// Coarse annotation type, used to group items when aggregating metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationType {
    Binary,
    Categorical,
    Likert,
}

impl AnnotationType {
    pub fn as_str(self) -> &'static str {
        match self {
            AnnotationType::Binary => "binary",
            AnnotationType::Categorical => "categorical",
            AnnotationType::Likert => "likert",
        }
    }
}

impl ItemKind {
    pub fn annotation_type(&self) -> AnnotationType {
        match self {
            ItemKind::Binary => AnnotationType::Binary,
            ItemKind::Categorical { .. } => AnnotationType::Categorical,
            ItemKind::Likert { .. } => AnnotationType::Likert,
        }
    }

    /// The full ordered label set for this kind.
    pub fn labels(&self) -> Vec<Label> {
        match self {
            ItemKind::Binary => vec![Label::Int(0), Label::Int(1)],
            ItemKind::Categorical { options } => {
                options.iter().map(|o| Label::Text(o.clone())).collect()
            }
            ItemKind::Likert { min, max, .. } => (*min..=*max).map(Label::Int).collect(),
        }
    }

    pub fn is_valid(&self, label: &Label) -> bool {
        match (self, label) {
            (ItemKind::Binary, Label::Int(v)) => *v == 0 || *v == 1,
            (ItemKind::Categorical { options }, Label::Text(s)) => options.iter().any(|o| o == s),
            (ItemKind::Likert { min, max, .. }, Label::Int(v)) => (*min..=*max).contains(v),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodedExample {
    pub text: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display_tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dependency {
    pub parent_item_id: String,
    pub required_parent_value: Label,
}

impl Codebook {
    pub fn from_json(text: &str) -> Result<Self, CodebookError> {
        let codebook: Codebook = serde_json::from_str(text)?;
        if codebook.schema_version != CODEBOOK_SCHEMA_VERSION {
            return Err(CodebookError::SchemaVersion {
                found: codebook.schema_version,
                expected: CODEBOOK_SCHEMA_VERSION,
            });
        }
        codebook.validate()?;
        Ok(codebook)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("codebook serializes")
    }

    /// Stable content hash of the canonical serialization.
    pub fn content_hash(&self) -> String {
        content_hash(serde_json::to_string(self).expect("codebook serializes").as_bytes())
    }

    pub fn items(&self) -> impl Iterator<Item = &AnnotationItem> {
        self.sections.iter().flat_map(|s| s.items.iter())
    }

    /// Items together with their owning section, in document order.
    pub fn items_with_sections(&self) -> impl Iterator<Item = (&Section, &AnnotationItem)> {
        self.sections
            .iter()
            .flat_map(|s| s.items.iter().map(move |i| (s, i)))
    }

    pub fn item(&self, id: &str) -> Option<&AnnotationItem> {
        self.items().find(|i| i.id == id)
    }

    pub fn section_of(&self, item_id: &str) -> Option<&Section> {
        self.sections
            .iter()
            .find(|s| s.items.iter().any(|i| i.id == item_id))
    }

    /// The first item in document order; used as the stratification key.
    pub fn root_item(&self) -> &AnnotationItem {
        &self.sections[0].items[0]
    }

    /// Checks every structural invariant and reports all violations at once.
    pub fn validate(&self) -> Result<(), CodebookError> {
        let mut diags = Vec::new();
        let mut push = |location: String, rule: &'static str, detail: String| {
            diags.push(Diagnostic {
                location,
                rule,
                detail,
            })
        };

        if self.sections.is_empty() {
            push(
                format!("codebook `{}`", self.id),
                "at least one section",
                "sections is empty".into(),
            );
        }
        let mut section_names = HashSet::new();
        let mut seen_items: HashMap<&str, usize> = HashMap::new();
        let mut position = 0usize;
        for section in &self.sections {
            if !section_names.insert(section.name.as_str()) {
                push(
                    format!("section `{}`", section.name),
                    "section names unique",
                    "duplicate section name".into(),
                );
            }
            if section.items.is_empty() {
                push(
                    format!("section `{}`", section.name),
                    "at least one item",
                    "items is empty".into(),
                );
            }
            for item in &section.items {
                let loc = format!("item `{}`", item.id);
                if seen_items.insert(item.id.as_str(), position).is_some() {
                    push(loc.clone(), "item ids unique", "duplicate item id".into());
                }
                position += 1;

                match &item.kind {
                    ItemKind::Likert { min, max, .. } if min >= max => push(
                        loc.clone(),
                        "Likert min < max",
                        format!("min={min}, max={max}"),
                    ),
                    ItemKind::Categorical { options } => {
                        if options.len() < 2 {
                            push(
                                loc.clone(),
                                "categorical needs at least two options",
                                format!("{} option(s)", options.len()),
                            );
                        }
                        let mut lowered = HashSet::new();
                        for o in options {
                            if !lowered.insert(o.trim().to_lowercase()) {
                                push(
                                    loc.clone(),
                                    "categorical options case-insensitively distinct",
                                    format!("duplicate option `{o}`"),
                                );
                            }
                        }
                    }
                    _ => {}
                }

                for (i, ex) in item.examples.iter().enumerate() {
                    if ex.text.trim().is_empty() {
                        push(
                            loc.clone(),
                            "example text non-empty",
                            format!("example #{}", i + 1),
                        );
                    }
                    if !item.kind.is_valid(&ex.label) {
                        push(
                            loc.clone(),
                            "example label valid for item kind",
                            format!("example #{} has label `{}`", i + 1, ex.label),
                        );
                    }
                }

                if let Some(dep) = &item.dependency {
                    // Parents must precede children, which also rules out cycles.
                    match seen_items.get(dep.parent_item_id.as_str()) {
                        Some(&p) if p < position - 1 => {
                            let parent = self
                                .item(&dep.parent_item_id)
                                .expect("seen parent exists");
                            if !parent.kind.is_valid(&dep.required_parent_value) {
                                push(
                                    loc.clone(),
                                    "required parent value valid for parent kind",
                                    format!(
                                        "`{}` is not a value of `{}`",
                                        dep.required_parent_value, dep.parent_item_id
                                    ),
                                );
                            }
                        }
                        _ => push(
                            loc.clone(),
                            "dependency acyclic, parent precedes child",
                            format!("parent `{}` not defined earlier", dep.parent_item_id),
                        ),
                    }
                }
            }
        }

        if diags.is_empty() {
            Ok(())
        } else {
            Err(CodebookError::Validation(diags))
        }
    }
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<Codebook, CodebookError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CodebookError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Codebook::from_json(&text)
}
