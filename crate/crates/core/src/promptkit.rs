//! Prompt rendering for the zero-shot, random-context and retrieved-context
//! strategies.
//!
//! Templates live in `templates/v1/` and are compiled in. Placeholders are
//! `{labels}`, `{context_examples}` and `{input_text}`; substitution is a
//! single pass, so braces inside sentences are never re-expanded.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EntitySpan, Sentence};
use crate::io::sha256_hex;

pub const TEMPLATE_VERSION: &str = "v1";
const BASELINE_TEMPLATE: &str = include_str!("../templates/v1/baseline.txt");
const CONTEXT_TEMPLATE: &str = include_str!("../templates/v1/context.txt");

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("label set is empty")]
    NoLabels,
    #[error("{mode} prompt with {count} context examples")]
    Cardinality { mode: PromptMode, count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Baseline,
    Icl,
    Rag,
}

impl std::fmt::Display for PromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PromptMode::Baseline => "baseline",
            PromptMode::Icl => "icl",
            PromptMode::Rag => "rag",
        })
    }
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" | "zero-shot" => Ok(PromptMode::Baseline),
            "icl" => Ok(PromptMode::Icl),
            "rag" => Ok(PromptMode::Rag),
            other => Err(format!("unknown mode `{other}` (expected baseline, icl or rag)")),
        }
    }
}

/// A context example already serialized for the prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextExample {
    pub sentence_id: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub mode: PromptMode,
    pub labels: Vec<String>,
    pub context_ids: Vec<usize>,
    pub input_sentence_id: usize,
}

impl RenderedPrompt {
    pub fn sha256(&self) -> String {
        sha256_hex(self.text.as_bytes())
    }
}

/// Python `repr` of a string: single quotes unless the text contains a
/// single quote and no double quote.
pub fn py_str(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') {
        '"'
    } else {
        '\''
    };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c if (c as u32) < 0x20 || c == '\x7f' => out.push_str(&format!("\\x{:02x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

/// Python-style list of quoted labels, e.g. `['PER', 'ORG']`.
pub fn label_list(labels: &[String]) -> String {
    let items: Vec<String> = labels.iter().map(|l| py_str(l)).collect();
    format!("[{}]", items.join(", "))
}

/// `[<sentence>, [{'Entity': <surface>, 'Label': <category>}, ...]]`.
pub fn serialize_example(s: &Sentence, gold: &[EntitySpan]) -> String {
    let mut spans: Vec<&EntitySpan> = gold.iter().collect();
    spans.sort_by_key(|e| e.start);
    let entities: Vec<String> = spans
        .iter()
        .map(|e| format!("{{'Entity': {}, 'Label': {}}}", py_str(&e.surface), py_str(&e.category)))
        .collect();
    format!("[{}, [{}]]", py_str(&s.text()), entities.join(", "))
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn render_prompt(
    mode: PromptMode,
    labels: &[String],
    context: &[ContextExample],
    input_sentence_id: usize,
    input_text: &str,
) -> Result<RenderedPrompt, PromptError> {
    if labels.is_empty() {
        return Err(PromptError::NoLabels);
    }
    let consistent = match mode {
        PromptMode::Baseline => context.is_empty(),
        PromptMode::Icl | PromptMode::Rag => !context.is_empty(),
    };
    if !consistent {
        return Err(PromptError::Cardinality {
            mode,
            count: context.len(),
        });
    }
    let labels_text = label_list(labels);
    let text = match mode {
        PromptMode::Baseline => fill(
            BASELINE_TEMPLATE,
            &[("labels", &labels_text), ("input_text", input_text)],
        ),
        PromptMode::Icl | PromptMode::Rag => {
            let examples: Vec<&str> = context.iter().map(|c| c.text.as_str()).collect();
            let joined = examples.join("\n\n");
            fill(
                CONTEXT_TEMPLATE,
                &[
                    ("labels", &labels_text),
                    ("context_examples", &joined),
                    ("input_text", input_text),
                ],
            )
        }
    };
    Ok(RenderedPrompt {
        text,
        mode,
        labels: labels.to_vec(),
        context_ids: context.iter().map(|c| c.sentence_id).collect(),
        input_sentence_id,
    })
}
