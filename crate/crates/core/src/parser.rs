//! Recovering the structured annotation from free-form model output.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codebook::{AnnotationItem, ItemKind, Label};

pub const RESPONSE_KEY: &str = "response";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonCompliance {
    NoJsonFound,
    MissingKey,
    InvalidValue,
    Transport,
}

impl NonCompliance {
    pub const ALL: [NonCompliance; 4] = [
        NonCompliance::NoJsonFound,
        NonCompliance::MissingKey,
        NonCompliance::InvalidValue,
        NonCompliance::Transport,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NonCompliance::NoJsonFound => "no_json_found",
            NonCompliance::MissingKey => "missing_key",
            NonCompliance::InvalidValue => "invalid_value",
            NonCompliance::Transport => "transport",
        }
    }
}

impl fmt::Display for NonCompliance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedAnnotation {
    Value(Label),
    NonCompliant(NonCompliance),
}

impl ParsedAnnotation {
    pub fn value(&self) -> Option<&Label> {
        match self {
            ParsedAnnotation::Value(v) => Some(v),
            ParsedAnnotation::NonCompliant(_) => None,
        }
    }

    pub fn is_compliant(&self) -> bool {
        matches!(self, ParsedAnnotation::Value(_))
    }
}

/// Removes `<think>…</think>` spans. A closing tag without an opening one
/// (some servers strip the opening tag) drops everything before it.
pub fn strip_reasoning(raw: &str) -> String {
    const OPEN: &str = "<think>";
    const CLOSE: &str = "</think>";
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    if let Some(close) = rest.rfind(CLOSE) {
        if !rest[..close].contains(OPEN) {
            rest = &rest[close + CLOSE.len()..];
        }
    }
    loop {
        match rest.find(OPEN) {
            Some(start) => match rest[start..].find(CLOSE) {
                Some(len) => {
                    out.push_str(&rest[..start]);
                    rest = &rest[start + len + CLOSE.len()..];
                }
                None => {
                    // unterminated trace: keep it, last-object selection copes
                    out.push_str(rest);
                    break;
                }
            },
            None => {
                out.push_str(rest);
                break;
            }
        }
    }
    out
}

/// All top-level JSON objects embedded in `text`, in order of appearance.
pub fn json_objects(text: &str) -> Vec<serde_json::Map<String, Value>> {
    let mut found = Vec::new();
    let mut pos = 0;
    while let Some(off) = text[pos..].find('{') {
        let start = pos + off;
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => {
                found.push(map);
                pos = start + stream.byte_offset();
            }
            _ => pos = start + 1,
        }
    }
    found
}

/// Extracts the annotation from raw model output.
///
/// Reasoning spans are stripped, then the last JSON object carrying the
/// `response` key wins and its value is normalized against the item kind.
pub fn extract_response(raw: &str, item: &AnnotationItem) -> ParsedAnnotation {
    let cleaned = strip_reasoning(raw);
    let objects = json_objects(&cleaned);
    if objects.is_empty() {
        return ParsedAnnotation::NonCompliant(NonCompliance::NoJsonFound);
    }
    let Some(value) = objects.iter().rev().find_map(|o| o.get(RESPONSE_KEY)) else {
        return ParsedAnnotation::NonCompliant(NonCompliance::MissingKey);
    };
    match normalize_label(value, item) {
        Ok(label) => ParsedAnnotation::Value(label),
        Err(reason) => ParsedAnnotation::NonCompliant(reason),
    }
}

pub fn normalize_label(raw: &Value, item: &AnnotationItem) -> Result<Label, NonCompliance> {
    normalize_value(raw, &item.kind).ok_or(NonCompliance::InvalidValue)
}

/// Canonicalizes a raw value for an item kind.
///
/// Binary accepts 1/0, "1"/"0" and yes/no in any case; categorical accepts a
/// trimmed, case-insensitive exact option match; Likert accepts an
/// integer-valued number or string within the scale.
pub fn normalize_value(raw: &Value, kind: &ItemKind) -> Option<Label> {
    match kind {
        ItemKind::Binary => {
            let v = match raw {
                Value::Number(_) => integral(raw)?,
                Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
                    "1" | "yes" => 1,
                    "0" | "no" => 0,
                    _ => return None,
                },
                _ => return None,
            };
            matches!(v, 0 | 1).then_some(Label::Int(v))
        }
        ItemKind::Categorical { options } => {
            let s = raw.as_str()?.trim().to_lowercase();
            options
                .iter()
                .find(|o| o.trim().to_lowercase() == s)
                .map(|o| Label::Text(o.clone()))
        }
        ItemKind::Likert { min, max, .. } => {
            let v = integral(raw)?;
            (*min..=*max).contains(&v).then_some(Label::Int(v))
        }
    }
}

fn integral(raw: &Value) -> Option<i64> {
    match raw {
        Value::Number(n) => n.as_i64().or_else(|| {
            let f = n.as_f64()?;
            (f.fract() == 0.0 && f.abs() < 9.0e15).then_some(f as i64)
        }),
        Value::String(s) => s.trim().parse::<i64>().ok(),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::ItemKind;
    use serde_json::json;

    fn item(kind: ItemKind) -> AnnotationItem {
        AnnotationItem {
            id: "i".into(),
            name: "I".into(),
            tooltip: "q".into(),
            kind,
            examples: vec![],
            dependency: None,
        }
    }

    fn binary() -> AnnotationItem {
        item(ItemKind::Binary)
    }
    fn specificity() -> AnnotationItem {
        item(ItemKind::Categorical {
            options: vec!["Specific".into(), "Universal".into()],
        })
    }
    fn likert() -> AnnotationItem {
        item(ItemKind::Likert {
            min: 1,
            max: 5,
            anchor_text: String::new(),
        })
    }

    #[test]
    fn exact_format() {
        assert_eq!(
            extract_response(r#"{"response": 1}"#, &binary()),
            ParsedAnnotation::Value(Label::Int(1))
        );
    }

    #[test]
    fn reasoning_and_chatter_are_ignored() {
        let raw = "<think>maybe {\"response\": \"Specific\"} ... long reasoning</think>\nFinal answer: {\"response\": \"Universal\"}";
        assert_eq!(
            extract_response(raw, &specificity()),
            ParsedAnnotation::Value(Label::Text("Universal".into()))
        );
    }

    #[test]
    fn orphan_closing_tag_drops_prefix() {
        let raw = "reasoning {\"response\": 2} more</think>{\"response\": 4}";
        assert_eq!(extract_response(raw, &likert()), ParsedAnnotation::Value(Label::Int(4)));
        let raw = "{\"response\": 2}</think> no answer";
        assert_eq!(
            extract_response(raw, &likert()),
            ParsedAnnotation::NonCompliant(NonCompliance::NoJsonFound)
        );
    }

    #[test]
    fn failure_reasons() {
        assert_eq!(
            extract_response("The answer is probably 3.", &likert()),
            ParsedAnnotation::NonCompliant(NonCompliance::NoJsonFound)
        );
        assert_eq!(
            extract_response(r#"{"answer": 3}"#, &likert()),
            ParsedAnnotation::NonCompliant(NonCompliance::MissingKey)
        );
        assert_eq!(
            extract_response(r#"{"response": 6}"#, &likert()),
            ParsedAnnotation::NonCompliant(NonCompliance::InvalidValue)
        );
        // last keyed object decides even when an earlier one was valid
        assert_eq!(
            extract_response(r#"{"response": 3} then {"response": "x"}"#, &likert()),
            ParsedAnnotation::NonCompliant(NonCompliance::InvalidValue)
        );
    }

    #[test]
    fn last_keyed_object_wins_over_trailing_unkeyed() {
        let raw = r#"```json
{"response": "Specific"}
```
{"confidence": 0.4}"#;
        assert_eq!(
            extract_response(raw, &specificity()),
            ParsedAnnotation::Value(Label::Text("Specific".into()))
        );
    }

    #[test]
    fn normalization_rules() {
        let b = ItemKind::Binary;
        assert_eq!(normalize_value(&json!("yes"), &b), Some(Label::Int(1)));
        assert_eq!(normalize_value(&json!("No"), &b), Some(Label::Int(0)));
        assert_eq!(normalize_value(&json!("1"), &b), Some(Label::Int(1)));
        assert_eq!(normalize_value(&json!(0), &b), Some(Label::Int(0)));
        assert_eq!(normalize_value(&json!(2), &b), None);
        assert_eq!(normalize_value(&json!(true), &b), None);

        let c = specificity().kind;
        assert_eq!(
            normalize_value(&json!(" universal "), &c),
            Some(Label::Text("Universal".into()))
        );
        assert_eq!(normalize_value(&json!("Univ"), &c), None);
        assert_eq!(normalize_value(&json!(1), &c), None);

        let l = likert().kind;
        assert_eq!(normalize_value(&json!(6), &l), None);
        assert_eq!(normalize_value(&json!("4"), &l), Some(Label::Int(4)));
        assert_eq!(normalize_value(&json!(3.0), &l), Some(Label::Int(3)));
        assert_eq!(normalize_value(&json!(3.5), &l), None);
        assert_eq!(normalize_label(&json!(6), &likert()), Err(NonCompliance::InvalidValue));
    }

    #[test]
    fn near_miss_categories_are_not_fuzzy_matched() {
        let topic = item(ItemKind::Categorical {
            options: vec!["Welfare And Quality Of Life".into(), "Economy".into()],
        });
        assert_eq!(
            extract_response(r#"{"response": "Welfare"}"#, &topic),
            ParsedAnnotation::NonCompliant(NonCompliance::InvalidValue)
        );
    }

    #[test]
    fn handles_multibyte_text_around_payload() {
        let raw = "Bigăr — “quoted” {not json} {\"response\": \"Specific\"} ✓";
        assert_eq!(
            extract_response(raw, &specificity()),
            ParsedAnnotation::Value(Label::Text("Specific".into()))
        );
    }
}
