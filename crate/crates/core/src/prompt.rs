//! Deterministic prompt rendering.
//!
//! Every prompt is assembled from the codebook section and item, the text
//! unit, a prompt style and a learning approach. Rendering is pure: the same
//! inputs always give the same bytes and the same fingerprint.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codebook::{AnnotationItem, CodedExample, ItemKind, Section, Unit};

/// Bumped whenever the template text changes, so old fingerprints never
/// collide with new renderings.
pub const TEMPLATE_VERSION: &str = "annotation-template/1";

pub const DEFAULT_PERSONA: &str = "You are an expert political scientist and data annotator with extensive experience in content analysis.";
pub const DEFAULT_COT: &str = "I'll think through this step by step: First, I'll identify key parts of the text relevant to this task, then reason about the correct label before giving my final answer.";

pub const JSON_INSTRUCTION: &str = "Return your response in JSON format, with the key \"response\".";
pub const BINARY_INSTRUCTION: &str = "Respond with 1 if \"Yes\" or 0 if \"No\".";
pub const SEPARATOR: &str = "---";

/// Line prefix of every rendered demonstration answer.
pub const DEMONSTRATION_PREFIX: &str = "{\"response\": ";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("few-shot requested but codebook has no examples (item `{0}`)")]
    NoExamples(String),
    #[error("item `{item}` does not belong to section `{section}`")]
    ItemNotInSection { item: String, section: String },
    #[error("unit `{0}` has empty text")]
    EmptyUnit(String),
    #[error("{0} text must not be empty")]
    EmptyStyleText(&'static str),
    #[error("few-shot max_examples must be at least 1")]
    ZeroExamples,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PromptStyle {
    Standard,
    Persona {
        #[serde(default = "default_persona")]
        text: String,
    },
    #[serde(rename = "cot")]
    ChainOfThought {
        #[serde(default = "default_cot")]
        text: String,
    },
}

fn default_persona() -> String {
    DEFAULT_PERSONA.to_owned()
}

fn default_cot() -> String {
    DEFAULT_COT.to_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleKind {
    Standard,
    Persona,
    Cot,
}

impl PromptStyle {
    pub fn persona() -> Self {
        PromptStyle::Persona {
            text: default_persona(),
        }
    }

    pub fn chain_of_thought() -> Self {
        PromptStyle::ChainOfThought { text: default_cot() }
    }

    pub fn kind(&self) -> StyleKind {
        match self {
            PromptStyle::Standard => StyleKind::Standard,
            PromptStyle::Persona { .. } => StyleKind::Persona,
            PromptStyle::ChainOfThought { .. } => StyleKind::Cot,
        }
    }

    /// Label used in result tables.
    pub fn label(&self) -> &'static str {
        match self {
            PromptStyle::Standard => "standard",
            PromptStyle::Persona { .. } => "persona",
            PromptStyle::ChainOfThought { .. } => "CoT",
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        match self {
            PromptStyle::Persona { text } if text.trim().is_empty() => {
                Err(PromptError::EmptyStyleText("persona"))
            }
            PromptStyle::ChainOfThought { text } if text.trim().is_empty() => {
                Err(PromptError::EmptyStyleText("chain-of-thought"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LearningApproach {
    ZeroShot,
    FewShot {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_examples: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproachKind {
    ZeroShot,
    FewShot,
}

impl LearningApproach {
    pub fn few_shot() -> Self {
        LearningApproach::FewShot { max_examples: None }
    }

    pub fn kind(&self) -> ApproachKind {
        match self {
            LearningApproach::ZeroShot => ApproachKind::ZeroShot,
            LearningApproach::FewShot { .. } => ApproachKind::FewShot,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            LearningApproach::ZeroShot => "Zero-Shot",
            LearningApproach::FewShot { .. } => "Few-Shot",
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        match self {
            LearningApproach::FewShot {
                max_examples: Some(0),
            } => Err(PromptError::ZeroExamples),
            _ => Ok(()),
        }
    }

    /// Number of demonstrations this approach embeds for `item`.
    pub fn example_count(&self, item: &AnnotationItem) -> usize {
        match self {
            LearningApproach::ZeroShot => 0,
            LearningApproach::FewShot { max_examples } => {
                max_examples.map_or(item.examples.len(), |m| m.min(item.examples.len()))
            }
        }
    }
}

impl fmt::Display for LearningApproach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub char_count: usize,
    pub fingerprint: String,
}

/// The identity of a rendering, as recorded in run logs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FingerprintInputs<'a> {
    pub template_version: &'a str,
    pub item_id: &'a str,
    pub style: &'a PromptStyle,
    pub approach: &'a LearningApproach,
    pub unit_id: &'a str,
}

/// 128-bit content hash over the rendering identity and the rendered text.
pub fn prompt_fingerprint(inputs: &FingerprintInputs<'_>, text: &str) -> String {
    let mut h = Sha256::new();
    let identity = serde_json::to_string(inputs).expect("fingerprint inputs serialize");
    for part in [identity.as_str(), text] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    let digest = h.finalize();
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// The kind-specific "Respond with ..." line.
pub fn response_instruction(kind: &ItemKind) -> String {
    match kind {
        ItemKind::Binary => BINARY_INSTRUCTION.to_owned(),
        ItemKind::Categorical { options } => format!("Respond with {}", options.join(", or ")),
        ItemKind::Likert { min, max, .. } => format!(
            "Respond with a whole number from {min} to {max} (inclusive), where {min} means lowest and {max} means highest."
        ),
    }
}

fn demonstration(example: &CodedExample) -> String {
    let label = serde_json::to_string(&example.label.to_json()).expect("label serializes");
    format!(
        "Text:\n\"{}\"\nResponse:\n{DEMONSTRATION_PREFIX}{label}}}",
        example.text.trim_end()
    )
}

/// Renders the item's coded examples as demonstrations, in codebook order.
pub fn render_examples_block(
    item: &AnnotationItem,
    limit: Option<usize>,
) -> Result<String, PromptError> {
    if item.examples.is_empty() {
        return Err(PromptError::NoExamples(item.id.clone()));
    }
    if limit == Some(0) {
        return Err(PromptError::ZeroExamples);
    }
    let take = limit.unwrap_or(usize::MAX);
    Ok(item
        .examples
        .iter()
        .take(take)
        .map(demonstration)
        .collect::<Vec<_>>()
        .join("\n"))
}

fn standard_body(
    section: &Section,
    item: &AnnotationItem,
    unit_text: &str,
    approach: &LearningApproach,
) -> Result<String, PromptError> {
    let mut lines = vec![
        section.name.trim_end().to_owned(),
        section.instructions.trim_end().to_owned(),
        item.name.trim_end().to_owned(),
        item.tooltip.trim_end().to_owned(),
        response_instruction(&item.kind),
        JSON_INSTRUCTION.to_owned(),
    ];
    if let LearningApproach::FewShot { max_examples } = approach {
        lines.push(render_examples_block(item, *max_examples)?);
    }
    lines.push(SEPARATOR.to_owned());
    lines.push("Text:".to_owned());
    lines.push(format!("\"{unit_text}\""));
    lines.push("Response:".to_owned());
    Ok(lines.join("\n"))
}

pub fn render_prompt(
    section: &Section,
    item: &AnnotationItem,
    unit: &Unit,
    style: &PromptStyle,
    approach: &LearningApproach,
) -> Result<RenderedPrompt, PromptError> {
    if !section.items.iter().any(|i| i.id == item.id) {
        return Err(PromptError::ItemNotInSection {
            item: item.id.clone(),
            section: section.name.clone(),
        });
    }
    if unit.text.trim().is_empty() {
        return Err(PromptError::EmptyUnit(unit.id.clone()));
    }
    style.validate()?;
    approach.validate()?;

    let standard = standard_body(section, item, &unit.text, approach)?;
    let text = match style {
        PromptStyle::Standard => standard,
        PromptStyle::Persona { text } => format!("{}\n\n{standard}", text.trim_end()),
        PromptStyle::ChainOfThought { text } => format!("{standard}\n{}", text.trim_end()),
    };
    let fingerprint = prompt_fingerprint(
        &FingerprintInputs {
            template_version: TEMPLATE_VERSION,
            item_id: &item.id,
            style,
            approach,
            unit_id: &unit.id,
        },
        &text,
    );
    Ok(RenderedPrompt {
        char_count: text.chars().count(),
        text,
        fingerprint,
    })
}
