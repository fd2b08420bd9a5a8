use std::collections::HashMap;
use std::net::{TcpStream, ToSocketAddrs};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::transcript::read_transcript;
use super::{BackendReply, CompletionParams, LlmError, ResponseFormat};
use crate::corpus::{extract_entities, Sentence};
use crate::http::{env_secret, HttpFailure, JsonClient, RetryPolicy};
use crate::promptkit::RenderedPrompt;

pub trait CompletionBackend: Send + Sync {
    fn id(&self) -> String;

    /// Cheap reachability check run before any paid request.
    fn probe(&self) -> Result<(), LlmError> {
        Ok(())
    }

    fn send(
        &self,
        prompt: &RenderedPrompt,
        params: &CompletionParams,
        fingerprint: &str,
    ) -> Result<BackendReply, LlmError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockMode {
    /// Replies with the gold entity list of the input sentence.
    EchoGold,
    /// Always `[]`.
    Empty,
    /// Always `not json {`.
    Malformed,
}

impl std::str::FromStr for MockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "echo-gold" => Ok(MockMode::EchoGold),
            "empty" => Ok(MockMode::Empty),
            "malformed" => Ok(MockMode::Malformed),
            other => Err(format!("unknown mock mode `{other}`")),
        }
    }
}

/// Gold spans of a sentence as a JSON array of `{"Entity", "Label"}`.
pub fn gold_entity_json(s: &Sentence) -> String {
    let items: Vec<Value> = extract_entities(s)
        .into_iter()
        .map(|e| json!({"Entity": e.surface, "Label": e.category}))
        .collect();
    serde_json::to_string(&items).expect("json array serializes")
}

pub struct MockBackend {
    mode: MockMode,
    gold: HashMap<usize, String>,
}

impl MockBackend {
    /// `gold` maps input sentence ids to the reply used by echo-gold.
    pub fn new(mode: MockMode, gold: HashMap<usize, String>) -> Self {
        MockBackend { mode, gold }
    }

    pub fn echo_gold<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Self {
        let gold = sentences.into_iter().map(|s| (s.id, gold_entity_json(s))).collect();
        MockBackend::new(MockMode::EchoGold, gold)
    }
}

impl CompletionBackend for MockBackend {
    fn id(&self) -> String {
        match self.mode {
            MockMode::EchoGold => "mock:echo-gold",
            MockMode::Empty => "mock:empty",
            MockMode::Malformed => "mock:malformed",
        }
        .to_string()
    }

    fn send(
        &self,
        prompt: &RenderedPrompt,
        _params: &CompletionParams,
        _fingerprint: &str,
    ) -> Result<BackendReply, LlmError> {
        let text = match self.mode {
            MockMode::EchoGold => self.gold.get(&prompt.input_sentence_id).cloned().ok_or_else(|| {
                LlmError::Config(format!(
                    "echo-gold mock has no gold for sentence {}",
                    prompt.input_sentence_id
                ))
            })?,
            MockMode::Empty => "[]".to_string(),
            MockMode::Malformed => "not json {".to_string(),
        };
        Ok(BackendReply {
            text,
            system_fingerprint: None,
            latency_ms: Some(0),
            attempts: 1,
        })
    }
}

/// Answers from a recorded transcript, keyed by request fingerprint.
pub struct ReplayBackend {
    replies: HashMap<String, BackendReply>,
}

impl ReplayBackend {
    pub fn open(path: &Path) -> Result<Self, LlmError> {
        let records = read_transcript(path).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        let mut replies = HashMap::new();
        for r in records {
            if let Some(text) = r.response {
                replies.entry(r.fingerprint).or_insert(BackendReply {
                    text,
                    system_fingerprint: r.system_fingerprint,
                    latency_ms: Some(r.latency_ms),
                    attempts: 1,
                });
            }
        }
        Ok(ReplayBackend { replies })
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }
}

impl CompletionBackend for ReplayBackend {
    fn id(&self) -> String {
        // The path is deliberately left out so reports do not depend on
        // where the transcript was copied to.
        "replay".to_string()
    }

    fn send(
        &self,
        _prompt: &RenderedPrompt,
        _params: &CompletionParams,
        fingerprint: &str,
    ) -> Result<BackendReply, LlmError> {
        self.replies
            .get(fingerprint)
            .cloned()
            .ok_or_else(|| LlmError::ReplayMiss(fingerprint.to_string()))
    }
}

/// OpenAI-compatible `/chat/completions` endpoint.
pub struct OpenAiBackend {
    endpoint: String,
    api_key: Option<String>,
    http: JsonClient,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    system_fingerprint: Option<String>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

impl OpenAiBackend {
    /// `endpoint` is the full chat-completions URL; the bearer token is
    /// read from `api_key_env` once, here.
    pub fn new(endpoint: impl Into<String>, api_key_env: Option<&str>, retry: RetryPolicy) -> Self {
        OpenAiBackend {
            endpoint: endpoint.into(),
            api_key: env_secret(api_key_env),
            http: JsonClient::new(retry, Duration::from_secs(300)),
        }
    }

    pub fn request_body(prompt: &RenderedPrompt, params: &CompletionParams) -> Value {
        let mut body = json!({
            "model": params.model_id,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": params.temperature,
            "seed": params.seed,
            "max_tokens": params.max_output_tokens,
        });
        if params.response_format == ResponseFormat::StructuredEntities {
            body["response_format"] = entity_schema();
        }
        body
    }
}

/// Structured-output schema: `{"entities": [{"Entity": str, "Label": str}]}`.
pub fn entity_schema() -> Value {
    json!({
        "type": "json_schema",
        "json_schema": {
            "name": "entities",
            "strict": true,
            "schema": {
                "type": "object",
                "properties": {
                    "entities": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "properties": {
                                "Entity": {"type": "string"},
                                "Label": {"type": "string"}
                            },
                            "required": ["Entity", "Label"],
                            "additionalProperties": false
                        }
                    }
                },
                "required": ["entities"],
                "additionalProperties": false
            }
        }
    })
}

impl CompletionBackend for OpenAiBackend {
    fn id(&self) -> String {
        format!("openai:{}", self.endpoint)
    }

    fn probe(&self) -> Result<(), LlmError> {
        let url = reqwest::Url::parse(&self.endpoint)
            .map_err(|e| LlmError::Config(format!("bad endpoint {}: {e}", self.endpoint)))?;
        let host = url
            .host_str()
            .ok_or_else(|| LlmError::Config(format!("endpoint {} has no host", self.endpoint)))?;
        let port = url.port_or_known_default().unwrap_or(80);
        let addrs = (host, port)
            .to_socket_addrs()
            .map_err(|e| LlmError::Unreachable(format!("{host}:{port}: {e}")))?;
        for addr in addrs {
            if TcpStream::connect_timeout(&addr, Duration::from_secs(5)).is_ok() {
                return Ok(());
            }
        }
        Err(LlmError::Unreachable(format!("{host}:{port}: connection refused")))
    }

    fn send(
        &self,
        prompt: &RenderedPrompt,
        params: &CompletionParams,
        _fingerprint: &str,
    ) -> Result<BackendReply, LlmError> {
        let body = Self::request_body(prompt, params);
        let (resp, attempts): (ChatResponse, u32) = self
            .http
            .post(&self.endpoint, self.api_key.as_deref(), &body)
            .map_err(|f| match f {
                HttpFailure::Exhausted { attempts, last } => LlmError::Provider {
                    attempts,
                    message: last,
                },
                HttpFailure::Rejected { status, body } => LlmError::Provider {
                    attempts: 1,
                    message: format!("HTTP {status}: {body}"),
                },
                HttpFailure::Decode(m) => LlmError::Protocol(m),
            })?;
        let text = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Protocol("response has no message content".into()))?;
        Ok(BackendReply {
            text,
            system_fingerprint: resp.system_fingerprint,
            latency_ms: None,
            attempts,
        })
    }
}
