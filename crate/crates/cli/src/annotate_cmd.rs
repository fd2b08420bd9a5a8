use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use annotator::annotate::{annotate_corpus, RunConfig};
use annotator::http::RetryPolicy;
use annotator::llm::{
    read_transcript, CompletionBackend, CompletionParams, LlmClient, MockBackend, MockMode, OpenAiBackend,
    ReplayBackend, ResponseFormat, DEFAULT_API_KEY_ENV,
};
use annotator::promptkit::PromptMode;
use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use crate::config::{self, FileConfig};
use crate::data::{train_split, CorpusSource, EmbedderArgs};
use crate::manifest::{ManifestBuilder, MANIFEST_FILE};
use crate::CorpusArgs;

pub const DEFAULT_CHAT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderChoice {
    Mock(MockMode),
    /// Transcript file, or a run directory holding `transcript.jsonl`.
    Replay(PathBuf),
    OpenAi {
        model: String,
    },
}

impl FromStr for ProviderChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "mock" => arg.parse().map(ProviderChoice::Mock),
            "replay" if !arg.is_empty() => Ok(ProviderChoice::Replay(arg.into())),
            "openai" if !arg.is_empty() => Ok(ProviderChoice::OpenAi { model: arg.into() }),
            _ => Err(format!(
                "unknown provider `{s}` (expected mock:echo-gold|empty|malformed, replay:PATH or openai:MODEL)"
            )),
        }
    }
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// Run configuration file (TOML); flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Context selection: baseline, icl or rag.
    #[arg(long)]
    pub mode: Option<PromptMode>,
    /// Number of context examples.
    #[arg(long)]
    pub m: Option<usize>,
    /// Share of the training split used as the labeled sample space.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Split seed; repeat or comma-separate for several runs.
    #[arg(long = "seed", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// mock:echo-gold, mock:empty, mock:malformed, replay:PATH or openai:MODEL.
    #[arg(long)]
    pub provider: Option<String>,
    /// Replay a recorded transcript (same as --provider replay:PATH).
    #[arg(long, value_name = "PATH", conflicts_with = "provider")]
    pub replay: Option<PathBuf>,
    /// Chat-completions URL for openai providers.
    #[arg(long, value_name = "URL")]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Sampling seed sent to the model.
    #[arg(long)]
    pub llm_seed: Option<u64>,
    #[arg(long)]
    pub max_output_tokens: Option<u32>,
    /// Request free text instead of schema-constrained output.
    #[arg(long)]
    pub free_text: bool,
    #[command(flatten)]
    pub embedder: EmbedderArgs,
    /// Draw a fresh random context for every target (icl only).
    #[arg(long)]
    pub icl_resample: bool,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// Largest tolerated share of failed requests.
    #[arg(long)]
    pub failure_threshold: Option<f64>,
    /// Output directory; with several seeds each run goes to seed-<s>/.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Everything `annotate` resolved from flags and the config file.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub corpus: CorpusSource,
    pub provider: String,
    pub endpoint: Option<String>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Run configuration of the first seed; later seeds differ only in `seed`.
    pub run: RunConfig,
    #[serde(skip)]
    corpus_args: CorpusArgs,
    #[serde(skip)]
    provider_choice: Option<ProviderChoice>,
    #[serde(skip)]
    embedder_args: EmbedderArgs,
}

fn params_from_transcript(path: &Path) -> Result<CompletionParams> {
    let records = read_transcript(path).with_context(|| format!("reading {}", path.display()))?;
    match records.first() {
        Some(r) => Ok(r.params.clone()),
        None => bail!("transcript {} is empty", path.display()),
    }
}

/// Transcript for one seed: a file as given, or `seed-<s>/transcript.jsonl`
/// then `transcript.jsonl` inside a directory.
fn replay_file(path: &Path, seed: u64) -> PathBuf {
    if path.is_dir() {
        let per_seed = path
            .join(format!("seed-{seed}"))
            .join(annotator::annotate::TRANSCRIPT_FILE);
        if per_seed.is_file() {
            return per_seed;
        }
        return path.join(annotator::annotate::TRANSCRIPT_FILE);
    }
    path.to_path_buf()
}

pub fn resolve(args: AnnotateArgs) -> Result<Resolved> {
    let cfg = match &args.config {
        Some(p) => config::load(p)?,
        None => FileConfig::default(),
    };
    let corpus_args = args.corpus.merged(&cfg)?;
    let corpus_source = corpus_args.source();

    let mode = match (args.mode, cfg.mode.as_deref()) {
        (Some(m), _) => m,
        (None, Some(s)) => s.parse().map_err(anyhow::Error::msg)?,
        (None, None) => bail!("no mode given: pass --mode baseline|icl|rag"),
    };
    let m = match args.m.or(cfg.m) {
        Some(m) => m,
        None if mode == PromptMode::Baseline => 0,
        None => bail!("{mode} mode needs --m"),
    };
    let Some(fraction) = args.fraction.or(cfg.fraction) else {
        bail!("no sample-space fraction given: pass --fraction");
    };
    let seeds = if args.seeds.is_empty() {
        cfg.seeds.clone().unwrap_or_default()
    } else {
        args.seeds.clone()
    };
    if seeds.is_empty() {
        bail!("no seed given: pass --seed");
    }
    let mut unique = seeds.clone();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != seeds.len() {
        bail!("duplicate seeds in {seeds:?}");
    }
    let Some(out) = args.out.clone().or_else(|| cfg.out.clone()) else {
        bail!("no output directory given: pass --out");
    };

    let provider = match (&args.replay, &args.provider, &cfg.provider) {
        (Some(p), _, _) => format!("replay:{}", p.display()),
        (None, Some(p), _) => p.clone(),
        (None, None, Some(p)) => p.clone(),
        (None, None, None) => bail!("no provider given: pass --provider"),
    };
    let choice: ProviderChoice = provider.parse().map_err(anyhow::Error::msg)?;

    let mut llm = match &choice {
        ProviderChoice::Mock(mode) => CompletionParams::new(format!("mock:{}", mode_name(*mode))),
        // Replays reuse the recorded parameters so request fingerprints match.
        ProviderChoice::Replay(p) => params_from_transcript(&replay_file(p, seeds[0]))?,
        ProviderChoice::OpenAi { model } => CompletionParams::new(model.clone()),
    };
    if let Some(t) = args.temperature.or(cfg.llm.temperature) {
        llm.temperature = t;
    }
    if let Some(s) = args.llm_seed.or(cfg.llm.seed) {
        llm.seed = s;
    }
    if let Some(n) = args.max_output_tokens.or(cfg.llm.max_output_tokens) {
        llm.max_output_tokens = n;
    }
    if args.free_text {
        llm.response_format = ResponseFormat::FreeText;
    } else if let Some(f) = &cfg.llm.response_format {
        llm.response_format = serde_json::from_value(serde_json::Value::String(f.clone()))
            .with_context(|| format!("unknown response_format `{f}`"))?;
    }
    let endpoint = match &choice {
        ProviderChoice::OpenAi { .. } => Some(
            args.endpoint
                .clone()
                .or_else(|| cfg.llm.endpoint.clone())
                .unwrap_or_else(|| DEFAULT_CHAT_ENDPOINT.to_string()),
        ),
        _ => None,
    };

    let embedder_args = args.embedder.clone().merged(&cfg.embedder);
    let corpus_name = corpus_args.name.clone().unwrap_or_default();
    let mut run = RunConfig::new(corpus_name, mode, m, fraction, seeds[0], llm);
    run.icl_resample_per_target = args.icl_resample || cfg.icl_resample_per_target.unwrap_or(false);
    if mode == PromptMode::Rag {
        run.embedder = Some(embedder_args.spec()?);
    }
    if let Some(n) = args.max_in_flight.or(cfg.max_in_flight) {
        run.max_in_flight = n;
    }
    if let Some(t) = args.failure_threshold.or(cfg.failure_threshold) {
        run.failure_threshold = t;
    }
    run.validate()?;

    Ok(Resolved {
        corpus: corpus_source,
        provider,
        endpoint,
        seeds,
        out,
        run,
        corpus_args,
        provider_choice: Some(choice),
        embedder_args,
    })
}

fn mode_name(mode: MockMode) -> &'static str {
    match mode {
        MockMode::EchoGold => "echo-gold",
        MockMode::Empty => "empty",
        MockMode::Malformed => "malformed",
    }
}

fn backend_for(
    choice: &ProviderChoice,
    endpoint: Option<&str>,
    train: &[annotator::corpus::Sentence],
    seed: u64,
) -> Result<(Box<dyn CompletionBackend>, Option<PathBuf>)> {
    Ok(match choice {
        ProviderChoice::Mock(MockMode::EchoGold) => (Box::new(MockBackend::echo_gold(train)), None),
        ProviderChoice::Mock(mode) => (Box::new(MockBackend::new(*mode, HashMap::new())), None),
        ProviderChoice::Replay(p) => {
            let file = replay_file(p, seed);
            let backend = ReplayBackend::open(&file)?;
            log::info!("replaying {} recorded responses from {}", backend.len(), file.display());
            (Box::new(backend), Some(file))
        }
        ProviderChoice::OpenAi { .. } => {
            let endpoint = endpoint.unwrap_or(DEFAULT_CHAT_ENDPOINT);
            if std::env::var_os(DEFAULT_API_KEY_ENV).is_none() {
                log::warn!("{DEFAULT_API_KEY_ENV} is not set; requests are sent without a bearer token");
            }
            let backend = OpenAiBackend::new(endpoint, Some(DEFAULT_API_KEY_ENV), RetryPolicy::default());
            (Box::new(backend), None)
        }
    })
}

pub fn run(args: AnnotateArgs) -> Result<()> {
    let config_path = args.config.clone();
    let resolved = resolve(args)?;
    let corpus = resolved.corpus_args.load()?;
    let train = train_split(&corpus)?;
    let embedder = match resolved.run.mode {
        PromptMode::Rag => Some(resolved.embedder_args.build()?),
        _ => None,
    };
    let choice = resolved.provider_choice.as_ref().expect("resolved provider");

    for &seed in &resolved.seeds {
        let mut manifest = ManifestBuilder::start("annotate");
        let dir = if resolved.seeds.len() == 1 {
            resolved.out.clone()
        } else {
            resolved.out.join(format!("seed-{seed}"))
        };
        let (backend, replay_input) = backend_for(choice, resolved.endpoint.as_deref(), train, seed)?;
        let mut run_config = resolved.run.clone();
        run_config.seed = seed;
        run_config.corpus = corpus.name.clone();
        let client = LlmClient::new(backend, run_config.llm.clone())?;
        log::info!("annotating {} with {} (seed {seed})", corpus.name, client.backend_id());
        let result = annotate_corpus(run_config.clone(), &corpus, &client, embedder.as_ref())?;
        let outputs = result
            .write(&dir)
            .with_context(|| format!("writing {}", dir.display()))?;

        let mut snapshot = resolved.clone();
        snapshot.run = run_config;
        snapshot.seeds = vec![seed];
        manifest.config(&snapshot);
        for p in resolved.corpus_args.input_paths() {
            manifest.input(p);
        }
        if let Some(p) = &config_path {
            manifest.input(p);
        }
        if let Some(p) = replay_input {
            manifest.input(p);
        }
        if let Some(p) = embedder.as_ref().and_then(|e| e.cache().path()) {
            manifest.input(p);
        }
        manifest.finish(&dir.join(MANIFEST_FILE), &outputs)?;

        let r = &result.report;
        println!(
            "{}: {} targets, {} predictions ({} matched, {} unmatched), {} provider failures",
            dir.display(),
            r.targets,
            r.predictions,
            r.matched,
            r.unmatched,
            r.provider_failures
        );
    }
    Ok(())
}
