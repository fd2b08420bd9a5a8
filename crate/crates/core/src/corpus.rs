//! Token-per-line NER corpora: parsing, strict BIO validation, span decoding
//! and dataset statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const DOCSTART: &str = "-DOCSTART-";

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("line {line}: expected at least {expected} columns, found {found}")]
    RaggedLine { line: usize, expected: usize, found: usize },
    #[error("sentence {sentence}, position {position}: {reason}")]
    InvalidBio {
        sentence: usize,
        position: usize,
        reason: String,
    },
    #[error("{split} split is present but empty")]
    EmptySplit { split: &'static str },
    #[error("label order {given:?} does not match the corpus label set {found:?}")]
    LabelOrder { given: Vec<String>, found: Vec<String> },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Discovery(String),
    #[error("{path}: {source}")]
    InFile {
        path: String,
        #[source]
        source: Box<CorpusError>,
    },
}

/// Tagging scheme of the tag column on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagScheme {
    /// Strict BIO: every span opens with `B-`.
    #[default]
    Bio,
    /// IOB1 (original CoNLL-2003 release): `B-` only separates adjacent
    /// spans of one category. Converted to BIO while parsing.
    Iob1,
}

impl std::str::FromStr for TagScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bio" | "iob2" => Ok(TagScheme::Bio),
            "iob1" | "iob" => Ok(TagScheme::Iob1),
            other => Err(format!("unknown tag scheme `{other}` (expected bio or iob1)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: usize,
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

impl Sentence {
    /// Space-joined tokens. This is both the prompt rendering and the text
    /// that gets embedded.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub category: String,
    pub surface: String,
}

impl EntitySpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub label_set: Vec<String>,
    pub train: Option<Vec<Sentence>>,
    pub valid: Option<Vec<Sentence>>,
    pub test: Option<Vec<Sentence>>,
}

impl Corpus {
    /// Assembles a corpus and derives its label set in order of first
    /// appearance (train, then valid, then test).
    pub fn new(
        name: impl Into<String>,
        train: Option<Vec<Sentence>>,
        valid: Option<Vec<Sentence>>,
        test: Option<Vec<Sentence>>,
    ) -> Result<Self, CorpusError> {
        let mut corpus = Corpus {
            name: name.into(),
            label_set: Vec::new(),
            train,
            valid,
            test,
        };
        for split in Split::ALL {
            if let Some(s) = corpus.split(split) {
                if s.is_empty() {
                    return Err(CorpusError::EmptySplit { split: split.as_str() });
                }
            }
        }
        corpus.label_set = collect_labels(corpus.splits().flat_map(|(_, s)| s.iter()));
        Ok(corpus)
    }

    pub fn split(&self, split: Split) -> Option<&[Sentence]> {
        match split {
            Split::Train => self.train.as_deref(),
            Split::Valid => self.valid.as_deref(),
            Split::Test => self.test.as_deref(),
        }
    }

    /// Present splits in train/valid/test order.
    pub fn splits(&self) -> impl Iterator<Item = (Split, &[Sentence])> {
        Split::ALL
            .into_iter()
            .filter_map(move |s| self.split(s).map(|v| (s, v)))
    }

    /// Replaces the label order (e.g. `PER, ORG, LOC, MISC` for prompts).
    /// The given labels must be exactly the corpus label set.
    pub fn with_label_order(mut self, order: &[String]) -> Result<Self, CorpusError> {
        let mut given = order.to_vec();
        let mut found = self.label_set.clone();
        given.sort();
        found.sort();
        given.dedup();
        if given != found || order.len() != found.len() {
            return Err(CorpusError::LabelOrder {
                given: order.to_vec(),
                found: self.label_set,
            });
        }
        self.label_set = order.to_vec();
        Ok(self)
    }
}

/// Categories in order of first appearance.
pub fn collect_labels<'a>(sentences: impl Iterator<Item = &'a Sentence>) -> Vec<String> {
    let mut labels: Vec<String> = Vec::new();
    for s in sentences {
        for tag in &s.tags {
            if let Some(cat) = tag_category(tag) {
                if !labels.iter().any(|l| l == cat) {
                    labels.push(cat.to_string());
                }
            }
        }
    }
    labels
}

fn tag_category(tag: &str) -> Option<&str> {
    tag.strip_prefix("B-").or_else(|| tag.strip_prefix("I-"))
}

/// Parses one split. `column` is the zero-based index of the tag column;
/// the token is always column 0.
pub fn parse_conll(raw_text: &str, column: usize, scheme: TagScheme) -> Result<Vec<Sentence>, CorpusError> {
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>| -> Result<(), CorpusError> {
        if tokens.is_empty() {
            return Ok(());
        }
        let id = sentences.len();
        let mut s = Sentence {
            id,
            tokens: std::mem::take(tokens),
            tags: std::mem::take(tags),
        };
        if scheme == TagScheme::Iob1 {
            iob1_to_bio(&mut s.tags);
        }
        validate_bio(&s)?;
        sentences.push(s);
        Ok(())
    };

    for (idx, line) in raw_text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags)?;
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols[0] == DOCSTART {
            flush(&mut tokens, &mut tags)?;
            continue;
        }
        if cols.len() <= column {
            return Err(CorpusError::RaggedLine {
                line: idx + 1,
                expected: column + 1,
                found: cols.len(),
            });
        }
        tokens.push(cols[0].to_string());
        tags.push(cols[column].to_string());
    }
    flush(&mut tokens, &mut tags)?;
    Ok(sentences)
}

pub fn read_conll(path: &Path, column: usize, scheme: TagScheme) -> Result<Vec<Sentence>, CorpusError> {
    let raw = fs::read(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_conll(&String::from_utf8_lossy(&raw), column, scheme)
}

/// Rewrites IOB1 tags in place: an `I-X` that does not continue an `X`
/// span opens one.
pub fn iob1_to_bio(tags: &mut [String]) {
    let mut prev: Option<String> = None;
    for tag in tags.iter_mut() {
        if let Some(cat) = tag.strip_prefix("I-") {
            if prev.as_deref() != Some(cat) {
                *tag = format!("B-{cat}");
            }
        }
        prev = tag_category(tag).map(str::to_string);
    }
}

pub fn validate_bio(s: &Sentence) -> Result<(), CorpusError> {
    let err = |position: usize, reason: String| CorpusError::InvalidBio {
        sentence: s.id,
        position,
        reason,
    };
    if s.tokens.len() != s.tags.len() {
        return Err(err(0, format!("{} tokens but {} tags", s.tokens.len(), s.tags.len())));
    }
    if s.tokens.is_empty() {
        return Err(err(0, "empty sentence".into()));
    }
    let mut prev: Option<&str> = None;
    for (i, tag) in s.tags.iter().enumerate() {
        if tag == "O" {
            prev = None;
        } else if let Some(cat) = tag.strip_prefix("B-") {
            if cat.is_empty() {
                return Err(err(i, format!("empty category in tag `{tag}`")));
            }
            prev = Some(cat);
        } else if let Some(cat) = tag.strip_prefix("I-") {
            if prev != Some(cat) || cat.is_empty() {
                return Err(err(i, "I- without preceding B-/I- of same type".into()));
            }
        } else {
            return Err(err(i, format!("malformed tag `{tag}`")));
        }
    }
    Ok(())
}

/// Decodes BIO tags into maximal spans, ordered by start.
pub fn extract_entities(s: &Sentence) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    let close = |spans: &mut Vec<EntitySpan>, start: usize, end: usize, cat: &str| {
        spans.push(EntitySpan {
            start,
            end,
            category: cat.to_string(),
            surface: s.tokens[start..end].join(" "),
        });
    };
    for (i, tag) in s.tags.iter().enumerate() {
        match (tag.strip_prefix("B-"), tag.strip_prefix("I-")) {
            (Some(cat), _) => {
                if let Some((start, c)) = open.take() {
                    close(&mut spans, start, i, c);
                }
                open = Some((i, cat));
            }
            (None, Some(cat)) if open.is_some_and(|(_, c)| c == cat) => {}
            _ => {
                if let Some((start, c)) = open.take() {
                    close(&mut spans, start, i, c);
                }
            }
        }
    }
    if let Some((start, c)) = open {
        close(&mut spans, start, s.tags.len(), c);
    }
    spans
}

/// Encodes non-overlapping spans as BIO tags over `len` tokens.
pub fn spans_to_tags(len: usize, spans: &[EntitySpan]) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for span in spans {
        tags[span.start] = format!("B-{}", span.category);
        for tag in &mut tags[span.start + 1..span.end] {
            *tag = format!("I-{}", span.category);
        }
    }
    tags
}

/// Writes sentences back in token-per-line form: `token tag`, one blank
/// line after each sentence.
pub fn to_conll<'a>(sentences: impl IntoIterator<Item = (&'a [String], &'a [String])>) -> String {
    let mut out = String::new();
    for (tokens, tags) in sentences {
        for (tok, tag) in tokens.iter().zip(tags) {
            out.push_str(tok);
            out.push(' ');
            out.push_str(tag);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub fn serialize_conll(sentences: &[Sentence]) -> String {
    to_conll(sentences.iter().map(|s| (s.tokens.as_slice(), s.tags.as_slice())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub sentences: BTreeMap<Split, usize>,
    pub tokens: BTreeMap<Split, usize>,
    pub entities: usize,
    /// Mean tokens per gold span over every present split, rounded to two
    /// decimals; `None` when the corpus has no entities.
    pub avg_entity_length: Option<f64>,
}

pub fn corpus_stats(c: &Corpus) -> DatasetStats {
    let mut sentences = BTreeMap::new();
    let mut tokens = BTreeMap::new();
    let mut span_count = 0usize;
    let mut span_tokens = 0usize;
    for (split, sents) in c.splits() {
        sentences.insert(split, sents.len());
        tokens.insert(split, sents.iter().map(Sentence::len).sum());
        for s in sents {
            for span in extract_entities(s) {
                span_count += 1;
                span_tokens += span.len();
            }
        }
    }
    let avg_entity_length = (span_count > 0).then(|| (span_tokens as f64 / span_count as f64 * 100.0).round() / 100.0);
    DatasetStats {
        name: c.name.clone(),
        sentences,
        tokens,
        entities: span_count,
        avg_entity_length,
    }
}
