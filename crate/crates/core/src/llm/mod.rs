//! Chat-completion client: deterministic parameters, request fingerprints,
//! and interchangeable backends (OpenAI-compatible HTTP, offline mocks,
//! transcript replay).

mod backend;
mod parse;
mod transcript;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::sha256_hex;
use crate::promptkit::RenderedPrompt;

pub use backend::{gold_entity_json, CompletionBackend, MockBackend, MockMode, OpenAiBackend, ReplayBackend};
pub use parse::{normalize_quotes, parse_entity_output, ParseFailure, ParseLevel, ParsedOutput, PredictedEntity};
pub use transcript::{read_transcript, write_jsonl, TranscriptRecord};

pub const DEFAULT_API_KEY_ENV: &str = "ANNOTATOR_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("completion provider failed after {attempts} attempt(s): {message}")]
    Provider { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("provider unreachable: {0}")]
    Unreachable(String),
    #[error("replay transcript has no response for request {0}")]
    ReplayMiss(String),
    #[error("llm configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResponseFormat {
    StructuredEntities,
    FreeText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_format")]
    pub response_format: ResponseFormat,
}

fn default_seed() -> u64 {
    42
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_format() -> ResponseFormat {
    ResponseFormat::StructuredEntities
}

impl CompletionParams {
    pub fn new(model_id: impl Into<String>) -> Self {
        CompletionParams {
            model_id: model_id.into(),
            temperature: 0.0,
            seed: default_seed(),
            max_output_tokens: default_max_tokens(),
            response_format: default_format(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(LlmError::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(LlmError::Config("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// sha256 over the prompt hash and every sampling parameter, in a fixed
/// textual layout.
pub fn request_fingerprint(prompt_text: &str, params: &CompletionParams) -> String {
    let canonical = format!(
        "prompt_sha256={}\nmodel={}\ntemperature={:?}\nseed={}\nmax_output_tokens={}\nresponse_format={}\n",
        sha256_hex(prompt_text.as_bytes()),
        params.model_id,
        params.temperature,
        params.seed,
        params.max_output_tokens,
        match params.response_format {
            ResponseFormat::StructuredEntities => "structured-entities",
            ResponseFormat::FreeText => "free-text",
        }
    );
    sha256_hex(canonical.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCompletion {
    pub text: String,
    pub model_id: String,
    pub latency_ms: u64,
    pub request_fingerprint: String,
    /// Server-reported fingerprint, when the endpoint sends one.
    pub system_fingerprint: Option<String>,
    pub attempts: u32,
}

/// What a backend returns for one request.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BackendReply {
    pub text: String,
    pub system_fingerprint: Option<String>,
    /// Set by replay so latency is reproduced rather than re-measured.
    pub latency_ms: Option<u64>,
    pub attempts: u32,
}

pub struct LlmClient {
    backend: Box<dyn CompletionBackend>,
    params: CompletionParams,
}

impl LlmClient {
    pub fn new(backend: Box<dyn CompletionBackend>, params: CompletionParams) -> Result<Self, LlmError> {
        params.validate()?;
        Ok(LlmClient { backend, params })
    }

    pub fn params(&self) -> &CompletionParams {
        &self.params
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn probe(&self) -> Result<(), LlmError> {
        self.backend.probe()
    }

    pub fn complete(&self, prompt: &RenderedPrompt) -> Result<RawCompletion, LlmError> {
        let fingerprint = request_fingerprint(&prompt.text, &self.params);
        let started = Instant::now();
        let reply = self.backend.send(prompt, &self.params, &fingerprint)?;
        let measured = started.elapsed().as_millis() as u64;
        if reply.text.trim().is_empty() {
            return Err(LlmError::Protocol("empty response body".into()));
        }
        Ok(RawCompletion {
            text: reply.text,
            model_id: self.params.model_id.clone(),
            latency_ms: reply.latency_ms.unwrap_or(measured),
            request_fingerprint: fingerprint,
            system_fingerprint: reply.system_fingerprint,
            attempts: reply.attempts.max(1),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::promptkit::{render_prompt, PromptMode};

    fn prompt(text: &str, id: usize) -> RenderedPrompt {
        render_prompt(PromptMode::Baseline, &["PER".to_string()], &[], id, text).unwrap()
    }

    #[test]
    fn fingerprint_depends_on_prompt_and_params() {
        let p = CompletionParams::new("m");
        let a = request_fingerprint("hello", &p);
        assert_eq!(a, request_fingerprint("hello", &p));
        assert_ne!(a, request_fingerprint("hello!", &p));
        let mut q = p.clone();
        q.seed = 43;
        assert_ne!(a, request_fingerprint("hello", &q));
    }

    #[test]
    fn defaults_follow_reproducible_settings() {
        let p = CompletionParams::new("gpt-4o-mini");
        assert_eq!(p.temperature, 0.0);
        assert_eq!(p.seed, 42);
        assert_eq!(p.max_output_tokens, 1024);
        let mut bad = p.clone();
        bad.temperature = -0.1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mock_modes() {
        let gold = [(7usize, r#"[{"Entity": "EU", "Label": "ORG"}]"#.to_string())]
            .into_iter()
            .collect();
        let echo = LlmClient::new(
            Box::new(MockBackend::new(MockMode::EchoGold, gold)),
            CompletionParams::new("mock"),
        )
        .unwrap();
        let out = echo.complete(&prompt("EU rejects", 7)).unwrap();
        assert_eq!(out.text, r#"[{"Entity": "EU", "Label": "ORG"}]"#);
        assert_eq!(out, echo.complete(&prompt("EU rejects", 7)).unwrap());
        assert!(matches!(echo.complete(&prompt("no gold", 8)), Err(LlmError::Config(_))));

        let empty = LlmClient::new(
            Box::new(MockBackend::new(MockMode::Empty, Default::default())),
            CompletionParams::new("mock"),
        )
        .unwrap();
        assert_eq!(empty.complete(&prompt("x", 0)).unwrap().text, "[]");
        let bad = LlmClient::new(
            Box::new(MockBackend::new(MockMode::Malformed, Default::default())),
            CompletionParams::new("mock"),
        )
        .unwrap();
        assert_eq!(bad.complete(&prompt("x", 0)).unwrap().text, "not json {");
    }
}
