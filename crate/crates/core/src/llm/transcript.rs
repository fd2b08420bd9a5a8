//! JSON-lines request/response transcripts. One record per target; replay
//! looks records up by request fingerprint.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CompletionParams;
use crate::promptkit::PromptMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub target_id: usize,
    pub fingerprint: String,
    pub model_id: String,
    pub mode: PromptMode,
    pub context_ids: Vec<usize>,
    pub prompt_sha256: String,
    pub prompt: String,
    pub params: CompletionParams,
    #[serde(default)]
    pub response: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub system_fingerprint: Option<String>,
}

/// Serializes each item as one JSON line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    crate::io::write_atomic(path, &out)
}

pub fn read_transcript(path: &Path) -> std::io::Result<Vec<TranscriptRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let rec = TranscriptRecord {
            target_id: 3,
            fingerprint: "ab".into(),
            model_id: "m".into(),
            mode: PromptMode::Rag,
            context_ids: vec![1, 2],
            prompt_sha256: "cd".into(),
            prompt: "line1\nline2".into(),
            params: CompletionParams::new("m"),
            response: Some("[]".into()),
            error: None,
            latency_ms: 12,
            system_fingerprint: Some("fp_1".into()),
        };
        write_jsonl(&path, &[rec.clone(), rec.clone()]).unwrap();
        assert_eq!(read_transcript(&path).unwrap(), vec![rec.clone(), rec]);
        std::fs::write(&path, "{bad\n").unwrap();
        assert!(read_transcript(&path).is_err());
    }
}
