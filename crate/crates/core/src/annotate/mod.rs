//! The annotation loop: split the training data, pick context for each
//! target sentence, prompt the model, parse and align its answer, and emit
//! BIO tags for every target.

mod align;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use align::{align_entities, AlignmentOutcome, UnmatchedReason};

use crate::corpus::{extract_entities, spans_to_tags, to_conll, Corpus, Sentence};
use crate::embeddings::{EmbedError, Embedder, EmbeddingVector, ProviderSpec};
use crate::io::write_atomic;
use crate::llm::{
    parse_entity_output, write_jsonl, CompletionParams, LlmClient, LlmError, ParseLevel, TranscriptRecord,
};
use crate::promptkit::{render_prompt, serialize_example, ContextExample, PromptError, PromptMode, TEMPLATE_VERSION};
use crate::rng::RNG_ALGORITHM;
use crate::splitter::{per_target_seed, sample_random_context, split_sample_space, SplitError, SplitResult, SplitSpec};
use crate::vectorstore::{build_index, IndexError, VectorIndex};

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("{failed} of {total} requests failed, above the {threshold} failure threshold")]
    FailureRate {
        failed: usize,
        total: usize,
        threshold: f64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AnnotateError {
    /// True when the failure came from the completion or embedding provider
    /// rather than from invalid input.
    pub fn is_provider_failure(&self) -> bool {
        matches!(
            self,
            AnnotateError::Llm(
                LlmError::Provider { .. } | LlmError::Protocol(_) | LlmError::Unreachable(_) | LlmError::ReplayMiss(_)
            ) | AnnotateError::FailureRate { .. }
                | AnnotateError::Embed(EmbedError::Provider { .. })
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: String,
    pub mode: PromptMode,
    /// Context size; ignored by the baseline.
    pub m: usize,
    pub fraction: f64,
    pub seed: u64,
    /// Draw a fresh random context per target instead of one per run.
    #[serde(default)]
    pub icl_resample_per_target: bool,
    /// Required for retrieved context.
    #[serde(default)]
    pub embedder: Option<ProviderSpec>,
    pub llm: CompletionParams,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Largest tolerated share of targets whose request failed.
    #[serde(default = "default_failure_threshold")]
    pub failure_threshold: f64,
}

fn default_in_flight() -> usize {
    4
}

fn default_failure_threshold() -> f64 {
    0.05
}

impl RunConfig {
    pub fn new(
        corpus: impl Into<String>,
        mode: PromptMode,
        m: usize,
        fraction: f64,
        seed: u64,
        llm: CompletionParams,
    ) -> Self {
        RunConfig {
            corpus: corpus.into(),
            mode,
            m,
            fraction,
            seed,
            icl_resample_per_target: false,
            embedder: None,
            llm,
            max_in_flight: default_in_flight(),
            failure_threshold: default_failure_threshold(),
        }
    }

    pub fn validate(&self) -> Result<(), AnnotateError> {
        SplitSpec::new(self.fraction, self.seed)?;
        if self.mode != PromptMode::Baseline && self.m == 0 {
            return Err(SplitError::EmptyContext.into());
        }
        if self.mode == PromptMode::Rag && self.embedder.is_none() {
            return Err(AnnotateError::Config("rag mode needs an embedder".into()));
        }
        if self.max_in_flight == 0 {
            return Err(AnnotateError::Config("max_in_flight must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_threshold) {
            return Err(AnnotateError::Config(format!(
                "failure_threshold must lie in [0, 1], got {}",
                self.failure_threshold
            )));
        }
        self.llm.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParseStatus {
    Strict,
    Wrapped,
    QuoteNormalized,
    Embedded,
    ParseFailure,
    ProviderError,
}

impl ParseStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ParseStatus::Strict => "strict",
            ParseStatus::Wrapped => "wrapped",
            ParseStatus::QuoteNormalized => "quote-normalized",
            ParseStatus::Embedded => "embedded",
            ParseStatus::ParseFailure => "parse-failure",
            ParseStatus::ProviderError => "provider-error",
        }
    }
}

impl From<ParseLevel> for ParseStatus {
    fn from(level: ParseLevel) -> Self {
        match level {
            ParseLevel::Strict => ParseStatus::Strict,
            ParseLevel::Wrapped => ParseStatus::Wrapped,
            ParseLevel::QuoteNormalized => ParseStatus::QuoteNormalized,
            ParseLevel::Embedded => ParseStatus::Embedded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub mode: PromptMode,
    pub context_ids: Vec<usize>,
    pub parse_status: ParseStatus,
    /// Entities decoded from the reply.
    pub predictions: usize,
    pub matched: usize,
    pub unmatched: usize,
    pub field_errors: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub sentence_id: usize,
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    pub provenance: Provenance,
}

impl AnnotatedSentence {
    pub fn to_sentence(&self) -> Sentence {
        Sentence {
            id: self.sentence_id,
            tokens: self.tokens.clone(),
            tags: self.tags.clone(),
        }
    }
}

/// Everything produced for one target.
#[derive(Debug, Clone)]
pub struct SentenceOutcome {
    pub annotated: AnnotatedSentence,
    pub unmatched_reasons: Vec<UnmatchedReason>,
    pub transcript: TranscriptRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLogEntry {
    pub target_id: usize,
    pub mode: PromptMode,
    pub context_ids: Vec<usize>,
    pub prompt_sha256: String,
}

/// Run-level telemetry. Deterministic given deterministic providers: it
/// holds no timings, paths or backend identity, so a replayed run reports
/// exactly what the recorded run did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub corpus: String,
    pub mode: PromptMode,
    pub m: Option<usize>,
    pub fraction: f64,
    pub seed: u64,
    pub rng_algorithm: String,
    pub template_version: String,
    pub model_id: String,
    pub embedder: Option<String>,
    pub sample_space: usize,
    pub targets: usize,
    /// Targets per parse status.
    pub parse_status: BTreeMap<ParseStatus, usize>,
    pub predictions: usize,
    pub matched: usize,
    pub unmatched: usize,
    pub unmatched_by_reason: BTreeMap<UnmatchedReason, usize>,
    pub field_errors: usize,
    pub provider_failures: usize,
    pub failure_rate: f64,
}

pub struct AnnotationRun {
    pub split: SplitResult,
    pub annotated: Vec<AnnotatedSentence>,
    pub report: RunReport,
    pub transcript: Vec<TranscriptRecord>,
    pub prompts: Vec<PromptLogEntry>,
}

pub const ANNOTATED_FILE: &str = "annotated.conll";
pub const REPORT_FILE: &str = "report.json";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const PROVENANCE_FILE: &str = "provenance.jsonl";
pub const SPLIT_FILE: &str = "split.json";

impl AnnotationRun {
    /// T̂ in token-per-line form, in target order.
    pub fn conll(&self) -> String {
        to_conll(self.annotated.iter().map(|a| (a.tokens.as_slice(), a.tags.as_slice())))
    }

    pub fn report_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.report).expect("report serializes");
        s.push('\n');
        s
    }

    /// Writes every output file atomically into `dir` and returns the paths.
    pub fn write(&self, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let annotated = dir.join(ANNOTATED_FILE);
        write_atomic(&annotated, self.conll().as_bytes())?;
        let report = dir.join(REPORT_FILE);
        write_atomic(&report, self.report_json().as_bytes())?;
        let split = dir.join(SPLIT_FILE);
        let split_json = serde_json::to_string_pretty(&self.split).expect("split serializes");
        write_atomic(&split, split_json.as_bytes())?;
        let transcript = dir.join(TRANSCRIPT_FILE);
        write_jsonl(&transcript, &self.transcript)?;
        let prompts = dir.join(PROMPTS_FILE);
        write_jsonl(&prompts, &self.prompts)?;
        let provenance = dir.join(PROVENANCE_FILE);
        let rows: Vec<serde_json::Value> = self
            .annotated
            .iter()
            .map(|a| {
                let mut v = serde_json::to_value(&a.provenance).expect("provenance serializes");
                v["sentence_id"] = a.sentence_id.into();
                v
            })
            .collect();
        write_jsonl(&provenance, &rows)?;
        Ok(vec![annotated, report, split, transcript, prompts, provenance])
    }
}

/// Split, retrieval index and fixed context, ready to annotate targets.
pub struct Pipeline<'a> {
    config: RunConfig,
    train: &'a [Sentence],
    labels: Vec<String>,
    split: SplitResult,
    client: &'a LlmClient,
    embedder: Option<&'a Embedder>,
    index: Option<VectorIndex>,
    fixed_context: Option<Vec<usize>>,
}

impl<'a> Pipeline<'a> {
    /// Validates the configuration, splits the training data and prepares
    /// context selection. The completion provider is probed before any
    /// embedding request is made.
    pub fn new(
        config: RunConfig,
        corpus: &'a Corpus,
        client: &'a LlmClient,
        embedder: Option<&'a Embedder>,
    ) -> Result<Self, AnnotateError> {
        config.validate()?;
        let train = corpus
            .train
            .as_deref()
            .ok_or_else(|| AnnotateError::Config(format!("corpus {} has no train split", corpus.name)))?;
        if train.iter().enumerate().any(|(i, s)| s.id != i) {
            return Err(AnnotateError::Config("train sentence ids must be 0..n in order".into()));
        }
        if corpus.label_set.is_empty() {
            return Err(PromptError::NoLabels.into());
        }
        if client.params() != &config.llm {
            return Err(AnnotateError::Config(
                "client parameters differ from the run configuration".into(),
            ));
        }
        let split = split_sample_space(train.len(), SplitSpec::new(config.fraction, config.seed)?)?;
        if config.mode != PromptMode::Baseline && config.m > split.x() {
            return Err(SplitError::ContextTooLarge {
                m: config.m,
                x: split.x(),
            }
            .into());
        }
        client.probe()?;

        let mut index = None;
        if config.mode == PromptMode::Rag {
            let embedder = embedder.ok_or_else(|| AnnotateError::Config("rag mode needs an embedder".into()))?;
            if let Some(spec) = &config.embedder {
                if spec != embedder.spec() {
                    return Err(AnnotateError::Config(
                        "embedder differs from the run configuration".into(),
                    ));
                }
            }
            let texts: Vec<String> = split.sample_space.iter().map(|&i| train[i].text()).collect();
            let vectors = embedder.embed_batch(&texts)?;
            index = Some(build_index(split.sample_space.iter().copied().zip(vectors).collect())?);
        }
        let fixed_context = (config.mode == PromptMode::Icl && !config.icl_resample_per_target)
            .then(|| sample_random_context(&split, config.m, run_context_seed(config.seed)))
            .transpose()?
            .map(|c| c.example_ids);

        Ok(Pipeline {
            labels: corpus.label_set.clone(),
            config,
            train,
            split,
            client,
            embedder: if index.is_some() { embedder } else { None },
            index,
            fixed_context,
        })
    }

    pub fn split(&self) -> &SplitResult {
        &self.split
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Context ids for one target, in prompt order (retrieval rank for rag,
    /// draw order for icl).
    pub fn context_for(&self, target_id: usize, query: Option<&EmbeddingVector>) -> Result<Vec<usize>, AnnotateError> {
        match self.config.mode {
            PromptMode::Baseline => Ok(Vec::new()),
            PromptMode::Icl => match &self.fixed_context {
                Some(ids) => Ok(ids.clone()),
                None => Ok(sample_random_context(
                    &self.split,
                    self.config.m,
                    per_target_seed(self.config.seed, target_id),
                )?
                .example_ids),
            },
            PromptMode::Rag => {
                let index = self.index.as_ref().expect("rag pipeline has an index");
                let owned;
                let query = match query {
                    Some(q) => q,
                    None => {
                        let embedder = self.embedder.expect("rag pipeline has an embedder");
                        owned = embedder.embed_batch(&[self.train[target_id].text()])?.remove(0);
                        &owned
                    }
                };
                Ok(index
                    .query(query, self.config.m)?
                    .into_iter()
                    .map(|h| h.sentence_id)
                    .collect())
            }
        }
    }

    pub fn annotate_sentence(&self, target_id: usize) -> Result<SentenceOutcome, AnnotateError> {
        self.annotate_with_query(target_id, None)
    }

    fn annotate_with_query(
        &self,
        target_id: usize,
        query: Option<&EmbeddingVector>,
    ) -> Result<SentenceOutcome, AnnotateError> {
        let target = self
            .train
            .get(target_id)
            .ok_or_else(|| AnnotateError::Config(format!("no train sentence {target_id}")))?;
        let context_ids = self.context_for(target_id, query)?;
        let context: Vec<ContextExample> = context_ids
            .iter()
            .map(|&id| {
                let s = &self.train[id];
                ContextExample {
                    sentence_id: id,
                    text: serialize_example(s, &extract_entities(s)),
                }
            })
            .collect();
        let prompt = render_prompt(self.config.mode, &self.labels, &context, target_id, &target.text())?;
        let params = self.client.params();
        let mut transcript = TranscriptRecord {
            target_id,
            fingerprint: crate::llm::request_fingerprint(&prompt.text, params),
            model_id: params.model_id.clone(),
            mode: self.config.mode,
            context_ids: context_ids.clone(),
            prompt_sha256: prompt.sha256(),
            prompt: prompt.text.clone(),
            params: params.clone(),
            response: None,
            error: None,
            latency_ms: 0,
            system_fingerprint: None,
        };

        let mut provenance = Provenance {
            mode: self.config.mode,
            context_ids,
            parse_status: ParseStatus::ProviderError,
            predictions: 0,
            matched: 0,
            unmatched: 0,
            field_errors: 0,
        };
        let mut tags = vec!["O".to_string(); target.len()];
        let mut unmatched_reasons = Vec::new();
        match self.client.complete(&prompt) {
            Err(e) => {
                log::warn!("target {target_id}: {e}");
                transcript.error = Some(e.to_string());
            }
            Ok(raw) => {
                transcript.latency_ms = raw.latency_ms;
                transcript.system_fingerprint = raw.system_fingerprint.clone();
                match parse_entity_output(&raw.text) {
                    Err(_) => provenance.parse_status = ParseStatus::ParseFailure,
                    Ok(parsed) => {
                        let outcome = align_entities(&target.tokens, &parsed.entities, &self.labels);
                        tags = spans_to_tags(target.len(), &outcome.spans());
                        provenance.parse_status = parsed.level.into();
                        provenance.predictions = parsed.entities.len();
                        provenance.matched = outcome.matched.len();
                        provenance.unmatched = outcome.unmatched.len();
                        provenance.field_errors = parsed.field_errors;
                        unmatched_reasons = outcome.unmatched.iter().map(|u| u.1).collect();
                    }
                }
                transcript.response = Some(raw.text);
            }
        }
        Ok(SentenceOutcome {
            annotated: AnnotatedSentence {
                sentence_id: target.id,
                tokens: target.tokens.clone(),
                tags,
                provenance,
            },
            unmatched_reasons,
            transcript,
        })
    }

    /// Annotates every target, up to `max_in_flight` at a time, committing
    /// results in target order.
    pub fn run(&self) -> Result<AnnotationRun, AnnotateError> {
        let targets = &self.split.targets;
        let queries: Option<Vec<EmbeddingVector>> = match (self.config.mode, self.embedder) {
            (PromptMode::Rag, Some(embedder)) => {
                let texts: Vec<String> = targets.iter().map(|&i| self.train[i].text()).collect();
                Some(embedder.embed_batch(&texts)?)
            }
            _ => None,
        };

        let slots: Vec<Mutex<Option<Result<SentenceOutcome, AnnotateError>>>> =
            targets.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let workers = self.config.max_in_flight.min(targets.len()).max(1);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= targets.len() || abort.load(Ordering::Relaxed) {
                        break;
                    }
                    let query = queries.as_ref().map(|q| &q[i]);
                    let result = self.annotate_with_query(targets[i], query);
                    if result.is_err() {
                        abort.store(true, Ordering::Relaxed);
                    }
                    *slots[i].lock().expect("slot lock") = Some(result);
                });
            }
        });

        let mut outcomes = Vec::with_capacity(targets.len());
        for slot in slots {
            match slot.into_inner().expect("slot lock") {
                Some(Ok(o)) => outcomes.push(o),
                Some(Err(e)) => return Err(e),
                // Skipped after another worker aborted; that error is
                // returned from its own slot.
                None => continue,
            }
        }
        let report = self.report(&outcomes);
        if report.failure_rate > self.config.failure_threshold {
            return Err(AnnotateError::FailureRate {
                failed: report.provider_failures,
                total: report.targets,
                threshold: self.config.failure_threshold,
            });
        }
        let prompts = outcomes
            .iter()
            .map(|o| PromptLogEntry {
                target_id: o.transcript.target_id,
                mode: o.transcript.mode,
                context_ids: o.transcript.context_ids.clone(),
                prompt_sha256: o.transcript.prompt_sha256.clone(),
            })
            .collect();
        let (annotated, transcript) = outcomes.into_iter().map(|o| (o.annotated, o.transcript)).unzip();
        Ok(AnnotationRun {
            split: self.split.clone(),
            annotated,
            report,
            transcript,
            prompts,
        })
    }

    fn report(&self, outcomes: &[SentenceOutcome]) -> RunReport {
        let mut parse_status = BTreeMap::new();
        let mut unmatched_by_reason = BTreeMap::new();
        let (mut predictions, mut matched, mut unmatched, mut field_errors) = (0, 0, 0, 0);
        for o in outcomes {
            let p = &o.annotated.provenance;
            *parse_status.entry(p.parse_status).or_insert(0) += 1;
            predictions += p.predictions;
            matched += p.matched;
            unmatched += p.unmatched;
            field_errors += p.field_errors;
            for r in &o.unmatched_reasons {
                *unmatched_by_reason.entry(*r).or_insert(0) += 1;
            }
        }
        let provider_failures = parse_status.get(&ParseStatus::ProviderError).copied().unwrap_or(0);
        let targets = self.split.t();
        RunReport {
            corpus: self.config.corpus.clone(),
            mode: self.config.mode,
            m: (self.config.mode != PromptMode::Baseline).then_some(self.config.m),
            fraction: self.config.fraction,
            seed: self.config.seed,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            template_version: TEMPLATE_VERSION.to_string(),
            model_id: self.config.llm.model_id.clone(),
            embedder: self
                .embedder
                .map(|e| format!("{}/{}", e.spec().provider_id(), e.spec().model_id)),
            sample_space: self.split.x(),
            targets,
            parse_status,
            predictions,
            matched,
            unmatched,
            unmatched_by_reason,
            field_errors,
            provider_failures,
            failure_rate: if targets == 0 {
                0.0
            } else {
                provider_failures as f64 / targets as f64
            },
        }
    }
}

/// Seed of the single per-run random context draw. Derived so that it does
/// not reuse the split's stream.
pub fn run_context_seed(seed: u64) -> u64 {
    per_target_seed(seed, usize::MAX)
}

/// Builds the pipeline and annotates every target of the training split.
pub fn annotate_corpus(
    config: RunConfig,
    corpus: &Corpus,
    client: &LlmClient,
    embedder: Option<&Embedder>,
) -> Result<AnnotationRun, AnnotateError> {
    Pipeline::new(config, corpus, client, embedder)?.run()
}
