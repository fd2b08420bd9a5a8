//! Lenient decoding of model output into entity predictions.
//!
//! Acceptance ladder, first match wins:
//! 1. the whole reply is a JSON array of `{Entity, Label}` objects;
//! 2. the whole reply is a JSON object wrapping that array under `entities`;
//! 3. either of the above after rewriting Python-style single-quoted strings;
//! 4. the first bracket-balanced `[...]` inside surrounding prose that decodes
//!    as an array (raw or quote-normalized).

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PredictedEntity {
    pub surface: String,
    pub category: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParseLevel {
    Strict,
    Wrapped,
    QuoteNormalized,
    Embedded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutput {
    pub entities: Vec<PredictedEntity>,
    pub level: ParseLevel,
    /// Array items skipped for lacking a usable `Entity` or `Label`.
    pub field_errors: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no entity array found in model output")]
pub struct ParseFailure;

pub fn parse_entity_output(raw: &str) -> Result<ParsedOutput, ParseFailure> {
    let text = raw.trim();
    if let Some((items, wrapped)) = decode_whole(text) {
        let level = if wrapped {
            ParseLevel::Wrapped
        } else {
            ParseLevel::Strict
        };
        return Ok(collect(&items, level));
    }
    if let Some((items, _)) = normalize_quotes(text).and_then(|t| decode_whole(&t)) {
        return Ok(collect(&items, ParseLevel::QuoteNormalized));
    }
    embedded_array(text)
        .map(|items| collect(&items, ParseLevel::Embedded))
        .ok_or(ParseFailure)
}

/// `(items, wrapped)` when `text` is an array or an `entities` wrapper.
fn decode_whole(text: &str) -> Option<(Vec<Value>, bool)> {
    match serde_json::from_str::<Value>(text).ok()? {
        Value::Array(items) => Some((items, false)),
        Value::Object(map) => map.into_iter().find_map(|(k, v)| match v {
            Value::Array(items) if k.eq_ignore_ascii_case("entities") => Some((items, true)),
            _ => None,
        }),
        _ => None,
    }
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, name: &str) -> Option<&'a str> {
    obj.iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(name))
        .and_then(|(_, v)| v.as_str())
}

fn collect(items: &[Value], level: ParseLevel) -> ParsedOutput {
    let mut entities = Vec::new();
    let mut field_errors = 0;
    for item in items {
        let pair = item
            .as_object()
            .and_then(|o| Some((field(o, "entity")?, field(o, "label")?)));
        match pair {
            Some((surface, category)) if !surface.trim().is_empty() => entities.push(PredictedEntity {
                surface: surface.to_string(),
                category: category.to_string(),
            }),
            _ => field_errors += 1,
        }
    }
    ParsedOutput {
        entities,
        level,
        field_errors,
    }
}

/// Rewrites single-quoted (Python repr) strings as JSON strings. Returns
/// `None` on an unterminated string.
pub fn normalize_quotes(text: &str) -> Option<String> {
    let mut out = String::with_capacity(text.len() + 16);
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        match c {
            '\'' | '"' => {
                let mut content = String::new();
                loop {
                    match chars.next()? {
                        '\\' => match chars.next()? {
                            'n' => content.push('\n'),
                            't' => content.push('\t'),
                            'r' => content.push('\r'),
                            'u' => {
                                let hex: String = chars.by_ref().take(4).collect();
                                let code = u32::from_str_radix(&hex, 16).ok()?;
                                content.push(char::from_u32(code).unwrap_or('\u{fffd}'));
                            }
                            other => content.push(other),
                        },
                        q if q == c => break,
                        other => content.push(other),
                    }
                }
                out.push_str(&serde_json::to_string(&content).expect("string serializes"));
            }
            other => out.push(other),
        }
    }
    Some(out)
}

/// End (exclusive) of the bracket group opening at `start`, skipping
/// brackets inside quoted strings.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut quote: Option<u8> = None;
    let mut i = start;
    while i < bytes.len() {
        let b = bytes[i];
        match quote {
            Some(q) => {
                if b == b'\\' {
                    i += 1;
                } else if b == q {
                    quote = None;
                }
            }
            None => match b {
                b'"' | b'\'' => {
                    // An apostrophe between letters is prose, not a quote.
                    let word_apostrophe = b == b'\''
                        && i > 0
                        && bytes[i - 1].is_ascii_alphanumeric()
                        && bytes.get(i + 1).is_some_and(|n| n.is_ascii_alphanumeric());
                    if !word_apostrophe {
                        quote = Some(b);
                    }
                }
                b'[' => depth += 1,
                b']' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(i + 1);
                    }
                }
                _ => {}
            },
        }
        i += 1;
    }
    None
}

fn embedded_array(text: &str) -> Option<Vec<Value>> {
    let bytes = text.as_bytes();
    let mut from = 0;
    while let Some(off) = text[from..].find('[') {
        let start = from + off;
        if let Some(end) = balanced_end(bytes, start) {
            let candidate = &text[start..end];
            let decoded = serde_json::from_str::<Value>(candidate)
                .ok()
                .or_else(|| normalize_quotes(candidate).and_then(|t| serde_json::from_str::<Value>(&t).ok()));
            if let Some(Value::Array(items)) = decoded {
                return Some(items);
            }
        }
        from = start + 1;
    }
    None
}
