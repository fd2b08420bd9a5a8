//! Bounded-retry JSON POST shared by the embeddings and chat clients.

use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Retry schedule: `attempts` tries in total, sleeping `base_delay * 2^i`
/// after failed try `i`. Only transport errors, HTTP 429 and 5xx retry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 1000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, failed_attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << failed_attempt.min(16)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HttpFailure {
    /// Gave up after `attempts` retryable failures; `last` describes the final one.
    Exhausted { attempts: u32, last: String },
    /// Non-retryable status (e.g. 400, 401).
    Rejected { status: u16, body: String },
    /// 2xx with a body that does not decode.
    Decode(String),
}

impl std::fmt::Display for HttpFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HttpFailure::Exhausted { attempts, last } => {
                write!(f, "gave up after {attempts} attempts: {last}")
            }
            HttpFailure::Rejected { status, body } => write!(f, "HTTP {status}: {body}"),
            HttpFailure::Decode(m) => write!(f, "undecodable response: {m}"),
        }
    }
}

pub struct JsonClient {
    client: reqwest::blocking::Client,
    policy: RetryPolicy,
}

impl JsonClient {
    pub fn new(policy: RetryPolicy, timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("TLS backend initializes");
        JsonClient { client, policy }
    }

    pub fn policy(&self) -> RetryPolicy {
        self.policy
    }

    /// POSTs `body` and decodes the JSON reply, retrying per the policy.
    /// Returns the decoded value and the number of attempts used.
    pub fn post<B: Serialize, R: DeserializeOwned>(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &B,
    ) -> Result<(R, u32), HttpFailure> {
        let attempts = self.policy.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.policy.delay(attempt - 1));
            }
            let mut req = self.client.post(url).json(body);
            if let Some(key) = bearer {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Err(e) => last = format!("transport: {e}"),
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let text = resp.text().map_err(|e| HttpFailure::Decode(e.to_string()))?;
                        return serde_json::from_str(&text)
                            .map(|r| (r, attempt + 1))
                            .map_err(|e| HttpFailure::Decode(format!("{e}: {}", truncate(&text))));
                    }
                    let body = resp.text().unwrap_or_default();
                    if status.as_u16() == 429 || status.is_server_error() {
                        last = format!("HTTP {}: {}", status.as_u16(), truncate(&body));
                    } else {
                        return Err(HttpFailure::Rejected {
                            status: status.as_u16(),
                            body: truncate(&body),
                        });
                    }
                }
            }
            log::warn!("{url}: attempt {} failed: {last}", attempt + 1);
        }
        Err(HttpFailure::Exhausted { attempts, last })
    }
}

fn truncate(s: &str) -> String {
    if s.chars().count() <= 200 {
        s.to_string()
    } else {
        format!("{}...", s.chars().take(200).collect::<String>())
    }
}

pub fn env_secret(var: Option<&str>) -> Option<String> {
    var.and_then(|v| std::env::var(v).ok()).filter(|s| !s.is_empty())
}
