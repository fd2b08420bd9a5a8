//! Sentence embeddings from a remote OpenAI-compatible endpoint or the
//! offline hashed embedder, always routed through [`EmbeddingCache`].

mod cache;
mod local;

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{env_secret, HttpFailure, JsonClient, RetryPolicy};

pub use cache::{cache_key, CacheKey, EmbeddingCache, CACHE_MAGIC, CACHE_VERSION};
pub use local::{local_test_embed, MIN_DIM};

pub const DEFAULT_EMBED_KEY_ENV: &str = "ANNOTATOR_EMBED_KEY";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding configuration: {0}")]
    Config(String),
    #[error("cannot embed {0:?}: text has no usable tokens")]
    Degenerate(String),
    #[error("embedding provider failed after {attempts} attempt(s): {message}")]
    Provider { attempts: u32, message: String },
    #[error("embedding integrity: {0}")]
    Integrity(String),
    #[error("embedding cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub provider_id: String,
    pub model_id: String,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    Remote,
    LocalTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderSpec {
    pub kind: ProviderKind,
    /// Full URL of the embeddings endpoint (remote only).
    #[serde(default)]
    pub endpoint: Option<String>,
    pub model_id: String,
    pub dim: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_key_env")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_batch_size() -> usize {
    64
}

fn default_key_env() -> Option<String> {
    Some(DEFAULT_EMBED_KEY_ENV.to_string())
}

fn default_in_flight() -> usize {
    4
}

impl ProviderSpec {
    pub fn local_test(dim: usize) -> Self {
        ProviderSpec {
            kind: ProviderKind::LocalTest,
            endpoint: None,
            model_id: format!("hashed-bag-{dim}"),
            dim,
            batch_size: default_batch_size(),
            api_key_env: None,
            max_in_flight: 1,
            retry: RetryPolicy::default(),
        }
    }

    pub fn remote(endpoint: impl Into<String>, model_id: impl Into<String>, dim: usize) -> Self {
        ProviderSpec {
            kind: ProviderKind::Remote,
            endpoint: Some(endpoint.into()),
            model_id: model_id.into(),
            dim,
            batch_size: default_batch_size(),
            api_key_env: default_key_env(),
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn provider_id(&self) -> &'static str {
        match self.kind {
            ProviderKind::Remote => "remote",
            ProviderKind::LocalTest => "local-test",
        }
    }

    fn validate(&self) -> Result<(), EmbedError> {
        if self.dim == 0 {
            return Err(EmbedError::Config("dim must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(EmbedError::Config("batch_size must be positive".into()));
        }
        if self.kind == ProviderKind::LocalTest && self.dim < MIN_DIM {
            return Err(EmbedError::Config(format!(
                "local-test embedder needs dim >= {MIN_DIM}"
            )));
        }
        if self.kind == ProviderKind::Remote && self.endpoint.is_none() {
            return Err(EmbedError::Config("remote embedder needs an endpoint".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct EmbeddingsRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

type BatchResult = Result<Vec<Vec<f64>>, EmbedError>;

pub struct Embedder {
    spec: ProviderSpec,
    cache: Arc<EmbeddingCache>,
    http: Option<JsonClient>,
    remote_calls: AtomicUsize,
}

impl Embedder {
    pub fn new(spec: ProviderSpec, cache: Arc<EmbeddingCache>) -> Result<Self, EmbedError> {
        spec.validate()?;
        let http = (spec.kind == ProviderKind::Remote).then(|| JsonClient::new(spec.retry, Duration::from_secs(120)));
        Ok(Embedder {
            spec,
            cache,
            http,
            remote_calls: AtomicUsize::new(0),
        })
    }

    pub fn spec(&self) -> &ProviderSpec {
        &self.spec
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    /// Number of HTTP batches sent so far (cache hits send none).
    pub fn remote_calls(&self) -> usize {
        self.remote_calls.load(Ordering::Relaxed)
    }

    /// One vector per input text, in input order.
    pub fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::Config("nothing to embed".into()));
        }
        if let Some(t) = texts.iter().find(|t| t.trim().is_empty()) {
            return Err(EmbedError::Degenerate(t.clone()));
        }
        let provider = self.spec.provider_id();
        let model = self.spec.model_id.as_str();

        let mut found: HashMap<&str, EmbeddingVector> = HashMap::new();
        let mut misses: Vec<&str> = Vec::new();
        let mut seen: HashSet<&str> = HashSet::new();
        for t in texts {
            if !seen.insert(t.as_str()) {
                continue;
            }
            match self.cache.get(provider, model, t)? {
                Some(v) => {
                    found.insert(t, v);
                }
                None => misses.push(t),
            }
        }

        if !misses.is_empty() {
            let fresh = match self.spec.kind {
                ProviderKind::LocalTest => misses
                    .iter()
                    .map(|t| local_test_embed(t, self.spec.dim))
                    .collect::<Result<Vec<_>, _>>()?,
                ProviderKind::Remote => {
                    let owned: Vec<String> = misses.iter().map(|t| t.to_string()).collect();
                    self.fetch_remote(&owned)?
                }
            };
            let mut stored = Vec::with_capacity(misses.len());
            for (&text, values) in misses.iter().zip(fresh) {
                if values.len() != self.spec.dim {
                    return Err(EmbedError::Integrity(format!(
                        "expected dimension {}, provider returned {}",
                        self.spec.dim,
                        values.len()
                    )));
                }
                if values.iter().any(|x| !x.is_finite()) {
                    return Err(EmbedError::Integrity(format!(
                        "non-finite component in embedding of {text:?}"
                    )));
                }
                stored.push((
                    text,
                    EmbeddingVector {
                        values,
                        provider_id: provider.to_string(),
                        model_id: model.to_string(),
                    },
                ));
            }
            self.cache
                .put_many(stored.iter().map(|(t, v)| (t.to_string(), v.clone())))?;
            found.extend(stored);
        }

        Ok(texts.iter().map(|t| found[t.as_str()].clone()).collect())
    }

    fn fetch_remote(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let http = self.http.as_ref().expect("remote embedder has a client");
        let url = self.spec.endpoint.as_deref().expect("validated");
        let key = env_secret(self.spec.api_key_env.as_deref());
        let chunks: Vec<&[String]> = texts.chunks(self.spec.batch_size).collect();
        let results: Mutex<Vec<Option<BatchResult>>> = Mutex::new((0..chunks.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = self.spec.max_in_flight.clamp(1, chunks.len());

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(chunk) = chunks.get(i) else { break };
                    self.remote_calls.fetch_add(1, Ordering::Relaxed);
                    let body = EmbeddingsRequest {
                        model: &self.spec.model_id,
                        input: chunk,
                    };
                    let out = http
                        .post::<_, EmbeddingsResponse>(url, key.as_deref(), &body)
                        .map_err(|f| provider_error(f, http.policy().attempts))
                        .and_then(|(resp, _)| order_response(resp, chunk.len()));
                    let failed = out.is_err();
                    results.lock().unwrap()[i] = Some(out);
                    if failed {
                        // Stop handing out work; other workers finish their chunk.
                        next.store(chunks.len(), Ordering::SeqCst);
                    }
                });
            }
        });

        let mut all = Vec::with_capacity(texts.len());
        for r in results.into_inner().unwrap() {
            match r {
                Some(Ok(vs)) => all.extend(vs),
                Some(Err(e)) => return Err(e),
                None => {}
            }
        }
        if all.len() != texts.len() {
            return Err(EmbedError::Integrity("incomplete embedding batch".into()));
        }
        Ok(all)
    }
}

fn provider_error(f: HttpFailure, policy_attempts: u32) -> EmbedError {
    let attempts = match &f {
        HttpFailure::Exhausted { attempts, .. } => *attempts,
        _ => policy_attempts.min(1),
    };
    EmbedError::Provider {
        attempts,
        message: f.to_string(),
    }
}

fn order_response(resp: EmbeddingsResponse, expected: usize) -> Result<Vec<Vec<f64>>, EmbedError> {
    if resp.data.len() != expected {
        return Err(EmbedError::Integrity(format!(
            "requested {expected} embeddings, received {}",
            resp.data.len()
        )));
    }
    let mut slots: Vec<Option<Vec<f64>>> = vec![None; expected];
    for d in resp.data {
        match slots.get_mut(d.index) {
            Some(slot @ None) => *slot = Some(d.embedding),
            _ => {
                return Err(EmbedError::Integrity(format!(
                    "bad or repeated response index {}",
                    d.index
                )))
            }
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("all slots filled")).collect())
}
