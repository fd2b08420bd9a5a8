use std::path::{Path, PathBuf};
use std::sync::Arc;

use annotator::corpus::{corpus_stats, Corpus, CorpusError, Split, TagScheme};
use annotator::dataset::{load_corpus, LoadOptions};
use annotator::embeddings::{Embedder, EmbeddingCache, ProviderKind, ProviderSpec};
use annotator::io::write_atomic;
use annotator::splitter::{split_sample_space, SplitSpec};
use annotator::vectorstore::build_index;
use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use crate::config::{EmbedderSection, FileConfig};
use crate::manifest::{command_manifest, ManifestBuilder};
use crate::CorpusArgs;

pub const DEFAULT_LOCAL_DIM: usize = 256;
pub const DEFAULT_EMBED_ENDPOINT: &str = "https://api.openai.com/v1/embeddings";

/// Serializable description of where a corpus came from, recorded in
/// manifests so `evaluate --run` can find the gold data again.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct CorpusSource {
    pub data: Option<PathBuf>,
    pub tag_col: Option<usize>,
    pub scheme: annotator::corpus::TagScheme,
    pub name: Option<String>,
    pub labels: Option<Vec<String>>,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

impl CorpusArgs {
    /// Fills unset fields from a config file.
    pub fn merged(mut self, cfg: &FileConfig) -> Result<Self> {
        self.data = self.data.or_else(|| cfg.data.clone());
        self.tag_col = self.tag_col.or(cfg.tag_col);
        if self.scheme.is_none() {
            self.scheme = cfg
                .scheme
                .as_deref()
                .map(str::parse)
                .transpose()
                .map_err(anyhow::Error::msg)?;
        }
        self.name = self.name.or_else(|| cfg.corpus.clone());
        self.labels = self.labels.or_else(|| cfg.labels.clone());
        Ok(self)
    }

    pub fn source(&self) -> CorpusSource {
        let abs = |p: &Option<PathBuf>| p.as_ref().map(|p| std::path::absolute(p).unwrap_or_else(|_| p.clone()));
        CorpusSource {
            data: abs(&self.data),
            tag_col: self.tag_col,
            scheme: self.scheme.unwrap_or_default(),
            name: self.name.clone(),
            labels: self.labels.clone(),
            train: abs(&self.train),
            valid: abs(&self.valid),
            test: abs(&self.test),
        }
    }

    /// Every file or directory the corpus is read from.
    pub fn input_paths(&self) -> Vec<PathBuf> {
        [&self.data, &self.train, &self.valid, &self.test]
            .into_iter()
            .flatten()
            .cloned()
            .collect()
    }

    pub fn load(&self) -> Result<Corpus> {
        self.source().load()
    }
}

impl CorpusSource {
    pub fn load(&self) -> Result<Corpus> {
        let mut files = std::collections::BTreeMap::new();
        for (split, file) in [
            (Split::Train, &self.train),
            (Split::Valid, &self.valid),
            (Split::Test, &self.test),
        ] {
            if let Some(f) = file {
                files.insert(split, f.clone());
            }
        }
        if self.data.is_none() && files.is_empty() {
            bail!("no corpus given: pass --data PATH or --train/--valid/--test FILE");
        }
        let opts = LoadOptions {
            name: self.name.clone(),
            tag_col: self.tag_col,
            scheme: self.scheme,
            label_order: self.labels.clone(),
            files,
        };
        let path = self.data.clone().unwrap_or_default();
        let corpus = match load_corpus(&path, &opts) {
            Err(CorpusError::InFile { path, source })
                if self.scheme == TagScheme::Bio && matches!(*source, CorpusError::InvalidBio { .. }) =>
            {
                bail!("{path}: {source} (if the file uses IOB1 tags, pass --scheme iob1)")
            }
            other => other?,
        };
        log::info!("loaded corpus {} with labels {:?}", corpus.name, corpus.label_set);
        Ok(corpus)
    }
}

pub fn train_split(corpus: &Corpus) -> Result<&[annotator::corpus::Sentence]> {
    match corpus.split(Split::Train) {
        Some(t) if !t.is_empty() => Ok(t),
        _ => bail!("corpus {} has no training split", corpus.name),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn parent_dir(path: &Path) -> &Path {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Corpus directory or file (same as --data).
    #[arg(value_name = "PATH")]
    pub path: Option<PathBuf>,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Also write the statistics to this file.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

pub fn ingest(args: IngestArgs) -> Result<()> {
    let mut corpus_args = args.corpus;
    if args.path.is_some() {
        corpus_args.data = args.path;
    }
    let mut manifest = ManifestBuilder::start("ingest");
    let corpus = corpus_args.load()?;
    let stats = corpus_stats(&corpus);
    let mut text = serde_json::to_string_pretty(&stats)?;
    text.push('\n');
    print!("{text}");
    if let Some(out) = &args.out {
        write_atomic(out, text.as_bytes()).with_context(|| format!("writing {}", out.display()))?;
        manifest.config(corpus_args.source());
        for p in corpus_args.input_paths() {
            manifest.input(p);
        }
        manifest.finish(&command_manifest(parent_dir(out), "ingest"), std::slice::from_ref(out))?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Share of the training split used as the labeled sample space.
    #[arg(long)]
    pub fraction: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_name = "FILE", default_value = "split.json")]
    pub out: PathBuf,
}

pub fn split(args: SplitArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("split");
    let corpus = args.corpus.load()?;
    let train = train_split(&corpus)?;
    let result = split_sample_space(train.len(), SplitSpec::new(args.fraction, args.seed)?)?;
    write_json(&args.out, &result)?;
    println!(
        "sample space {} / targets {} of {} training sentences -> {}",
        result.x(),
        result.t(),
        train.len(),
        args.out.display()
    );
    manifest.config(serde_json::json!({
        "corpus": args.corpus.source(),
        "fraction": args.fraction,
        "seed": args.seed,
    }));
    for p in args.corpus.input_paths() {
        manifest.input(p);
    }
    manifest.finish(
        &command_manifest(parent_dir(&args.out), "split"),
        std::slice::from_ref(&args.out),
    )?;
    Ok(())
}

/// Embedding provider flags. Unset flags fall back to the config file, then
/// to the deterministic local test embedder.
#[derive(Debug, Clone, Default, Args)]
pub struct EmbedderArgs {
    /// Embedding provider: local-test or remote.
    #[arg(long = "embedder", value_name = "KIND")]
    pub embed_kind: Option<String>,
    #[arg(long = "embed-model", value_name = "ID")]
    pub embed_model: Option<String>,
    /// Full URL of an OpenAI-compatible embeddings endpoint.
    #[arg(long = "embed-endpoint", value_name = "URL")]
    pub embed_endpoint: Option<String>,
    #[arg(long = "embed-dim", value_name = "N")]
    pub embed_dim: Option<usize>,
    #[arg(long = "embed-batch", value_name = "N")]
    pub embed_batch_size: Option<usize>,
    /// Persistent embedding cache file (created if missing).
    #[arg(long = "embed-cache", value_name = "FILE")]
    pub embed_cache: Option<PathBuf>,
}

impl EmbedderArgs {
    pub fn merged(self, s: &EmbedderSection) -> Self {
        EmbedderArgs {
            embed_kind: self.embed_kind.or_else(|| s.kind.clone()),
            embed_model: self.embed_model.or_else(|| s.model_id.clone()),
            embed_endpoint: self.embed_endpoint.or_else(|| s.endpoint.clone()),
            embed_dim: self.embed_dim.or(s.dim),
            embed_batch_size: self.embed_batch_size.or(s.batch_size),
            embed_cache: self.embed_cache.or_else(|| s.cache.clone()),
        }
    }

    pub fn spec(&self) -> Result<ProviderSpec> {
        let kind = match self.embed_kind.as_deref().unwrap_or("local-test") {
            "local-test" | "local" => ProviderKind::LocalTest,
            "remote" => ProviderKind::Remote,
            other => bail!("unknown embedder `{other}` (expected local-test or remote)"),
        };
        let mut spec = match kind {
            ProviderKind::LocalTest => {
                if self.embed_model.is_some() || self.embed_endpoint.is_some() {
                    bail!("the local-test embedder takes no model or endpoint");
                }
                ProviderSpec::local_test(self.embed_dim.unwrap_or(DEFAULT_LOCAL_DIM))
            }
            ProviderKind::Remote => {
                let Some(model) = &self.embed_model else {
                    bail!("a remote embedder needs --embed-model");
                };
                let Some(dim) = self.embed_dim else {
                    bail!("a remote embedder needs --embed-dim");
                };
                let endpoint = self.embed_endpoint.as_deref().unwrap_or(DEFAULT_EMBED_ENDPOINT);
                ProviderSpec::remote(endpoint, model.as_str(), dim)
            }
        };
        if let Some(b) = self.embed_batch_size {
            spec.batch_size = b;
        }
        Ok(spec)
    }

    pub fn build(&self) -> Result<Embedder> {
        let cache = match &self.embed_cache {
            Some(p) => EmbeddingCache::open(p)?,
            None => EmbeddingCache::in_memory(),
        };
        Ok(Embedder::new(self.spec()?, Arc::new(cache))?)
    }
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub embedder: EmbedderArgs,
    #[arg(long)]
    pub fraction: f64,
    #[arg(long)]
    pub seed: u64,
    /// Where to save the sample-space index.
    #[arg(long, value_name = "FILE", default_value = "index.vidx")]
    pub index_out: PathBuf,
}

#[derive(Debug, Serialize)]
struct EmbedSummary {
    provider: String,
    model_id: String,
    dim: usize,
    vectors: usize,
    remote_batches: usize,
    cache_entries: usize,
    index: PathBuf,
    fingerprint: String,
}

pub fn embed(args: EmbedArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("embed");
    let corpus = args.corpus.load()?;
    let train = train_split(&corpus)?;
    let split = split_sample_space(train.len(), SplitSpec::new(args.fraction, args.seed)?)?;
    let embedder = args.embedder.build()?;
    let texts: Vec<String> = split.sample_space.iter().map(|&i| train[i].text()).collect();
    let vectors = embedder.embed_batch(&texts)?;
    let index = build_index(split.sample_space.iter().copied().zip(vectors).collect())?;
    index
        .save(&args.index_out)
        .with_context(|| format!("writing {}", args.index_out.display()))?;
    let summary = EmbedSummary {
        provider: embedder.spec().provider_id().to_string(),
        model_id: embedder.spec().model_id.clone(),
        dim: index.dim(),
        vectors: index.len(),
        remote_batches: embedder.remote_calls(),
        cache_entries: embedder.cache().len(),
        index: args.index_out.clone(),
        fingerprint: format!(
            "{}/{}/{}",
            index.fingerprint().provider_id,
            index.fingerprint().model_id,
            index.dim()
        ),
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    manifest.config(serde_json::json!({
        "corpus": args.corpus.source(),
        "fraction": args.fraction,
        "seed": args.seed,
        "embedder": embedder.spec(),
    }));
    for p in args.corpus.input_paths() {
        manifest.input(p);
    }
    let mut outputs = vec![args.index_out.clone()];
    outputs.extend(embedder.cache().path().map(Path::to_path_buf));
    manifest.finish(&command_manifest(parent_dir(&args.index_out), "embed"), &outputs)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedder_defaults_to_local_test() {
        let spec = EmbedderArgs::default().spec().unwrap();
        assert_eq!(spec, ProviderSpec::local_test(DEFAULT_LOCAL_DIM));
        let remote = EmbedderArgs {
            embed_kind: Some("remote".into()),
            embed_model: Some("text-embedding-3-large".into()),
            embed_dim: Some(3072),
            ..Default::default()
        };
        assert_eq!(remote.spec().unwrap().endpoint.as_deref(), Some(DEFAULT_EMBED_ENDPOINT));
        let missing_dim = EmbedderArgs {
            embed_dim: None,
            ..remote
        };
        assert!(missing_dim.spec().is_err());
    }

    #[test]
    fn flags_override_config() {
        let section = EmbedderSection {
            kind: Some("local-test".into()),
            dim: Some(64),
            ..Default::default()
        };
        let args = EmbedderArgs {
            embed_dim: Some(128),
            ..Default::default()
        }
        .merged(&section);
        assert_eq!(args.spec().unwrap().dim, 128);
    }
}
