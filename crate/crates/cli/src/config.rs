//! Run-configuration files (TOML). Every key is optional so that command
//! line flags can fill in or override any of them.
//!
//! ```toml
//! corpus = "conll2003"
//! data = "data/conll2003"
//! labels = ["PER", "ORG", "LOC", "MISC"]
//! mode = "rag"
//! m = 25
//! fraction = 0.30
//! seeds = [1, 2, 3, 4, 5]
//! provider = "openai:gpt-4o-mini"
//! out = "runs/conll2003/rag-m25-f30"
//!
//! [llm]
//! temperature = 0.0
//! seed = 42
//!
//! [embedder]
//! kind = "remote"
//! model_id = "text-embedding-3-large"
//! dim = 3072
//! cache = "cache/embeddings.embc"
//! ```
//!
//! Credentials never belong here: they are read from `ANNOTATOR_API_KEY`
//! and `ANNOTATOR_EMBED_KEY`, and a file that looks like it holds one is
//! refused.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub corpus: Option<String>,
    pub data: Option<PathBuf>,
    pub tag_col: Option<usize>,
    pub scheme: Option<String>,
    pub labels: Option<Vec<String>>,
    pub mode: Option<String>,
    pub m: Option<usize>,
    pub fraction: Option<f64>,
    pub seeds: Option<Vec<u64>>,
    pub icl_resample_per_target: Option<bool>,
    pub provider: Option<String>,
    pub max_in_flight: Option<usize>,
    pub failure_threshold: Option<f64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub llm: LlmSection,
    #[serde(default)]
    pub embedder: EmbedderSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmSection {
    pub endpoint: Option<String>,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
    pub max_output_tokens: Option<u32>,
    pub response_format: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderSection {
    /// `local-test` or `remote`.
    pub kind: Option<String>,
    pub model_id: Option<String>,
    pub endpoint: Option<String>,
    pub dim: Option<usize>,
    pub batch_size: Option<usize>,
    pub cache: Option<PathBuf>,
}

const SECRET_KEY_NAMES: [&str; 5] = ["api_key", "apikey", "secret", "token", "password"];

/// Describes the first credential-looking entry in a config text, if any:
/// a key named like a secret, or a value shaped like a provider API key.
pub fn find_secret(text: &str) -> Option<String> {
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or_default();
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let key = key.trim().trim_matches('"').to_ascii_lowercase();
        if key != "max_output_tokens" && SECRET_KEY_NAMES.iter().any(|s| key.contains(s)) {
            return Some(format!("line {}: key `{key}`", n + 1));
        }
        let value = value.trim().trim_matches(|c| c == '"' || c == '\'');
        let key_like = ["sk-", "sk_", "pk-", "hf_", "Bearer "]
            .iter()
            .any(|p| value.starts_with(p))
            && value.len() >= 20;
        if key_like {
            return Some(format!("line {}: value of `{key}`", n + 1));
        }
    }
    None
}

pub fn load(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(where_) = find_secret(&text) {
        log::warn!("{} appears to contain a credential ({where_})", path.display());
        bail!(
            "refusing config {}: it appears to contain a credential ({where_}); \
             put keys in ANNOTATOR_API_KEY / ANNOTATOR_EMBED_KEY instead",
            path.display()
        );
    }
    let mut cfg: FileConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    // Relative paths in a config file are relative to the file itself.
    let base = path.parent().unwrap_or(Path::new("."));
    let rebase = |p: &mut Option<PathBuf>| {
        if let Some(inner) = p.as_mut() {
            if inner.is_relative() {
                *inner = base.join(&*inner);
            }
        }
    };
    rebase(&mut cfg.data);
    rebase(&mut cfg.out);
    rebase(&mut cfg.embedder.cache);
    if let Some(p) = cfg.provider.as_mut() {
        if let Some(rest) = p.strip_prefix("replay:") {
            if Path::new(rest).is_relative() {
                *p = format!("replay:{}", base.join(rest).display());
            }
        }
    }
    Ok(cfg)
}
