use std::path::{Path, PathBuf};

use annotator::annotate::{ANNOTATED_FILE, SPLIT_FILE};
use annotator::corpus::{parse_conll, Corpus, Sentence, Split, TagScheme};
use annotator::evaluate::{aggregate_runs, format_mean_std, metrics_table, span_prf, MetricsReport};
use annotator::io::write_atomic;
use annotator::splitter::SplitResult;
use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use crate::data::CorpusSource;
use crate::manifest::{command_manifest, ManifestBuilder, RunManifest, MANIFEST_FILE};
use crate::CorpusArgs;

pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Annotation run directory; repeat to aggregate over seeds.
    #[arg(long = "run", value_name = "DIR")]
    pub runs: Vec<PathBuf>,
    /// Predicted token-per-line file, scored instead of a run directory.
    #[arg(long, value_name = "FILE", conflicts_with = "runs")]
    pub pred: Option<PathBuf>,
    /// Split file whose targets map predicted sentences to training ids.
    #[arg(long, value_name = "FILE", requires = "pred")]
    pub split_file: Option<PathBuf>,
    /// Gold corpus. For runs, defaults to the corpus named in the run manifest.
    #[arg(long, value_name = "PATH")]
    pub gold: Option<PathBuf>,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Gold split compared against --pred.
    #[arg(long = "split", default_value = "train", value_parser = ["train", "valid", "test"])]
    pub split: String,
    /// Metrics (or the cross-run aggregate) as JSON.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn read_predictions(path: &Path) -> Result<Vec<Sentence>> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_conll(&raw, 1, TagScheme::Bio).with_context(|| format!("parsing {}", path.display()))
}

/// Pairs predictions with gold sentences: prediction `i` is gold sentence
/// `ids[i]`. Tokens must agree exactly.
fn align_to_gold(mut pred: Vec<Sentence>, gold: &[Sentence], ids: &[usize]) -> Result<(Vec<Sentence>, Vec<Sentence>)> {
    if pred.len() != ids.len() {
        bail!("{} predicted sentences for {} expected ids", pred.len(), ids.len());
    }
    let mut gold_sel = Vec::with_capacity(ids.len());
    for (p, &id) in pred.iter_mut().zip(ids) {
        let Some(g) = gold.get(id) else {
            bail!("sentence id {id} is outside the gold split ({} sentences)", gold.len());
        };
        if p.tokens != g.tokens {
            bail!("predicted sentence for id {id} has tokens that differ from the gold sentence");
        }
        p.id = g.id;
        gold_sel.push(g.clone());
    }
    Ok((pred, gold_sel))
}

fn gold_split(corpus: &Corpus, split: Split) -> Result<&[Sentence]> {
    corpus
        .split(split)
        .with_context(|| format!("gold corpus {} has no {split} split", corpus.name))
}

fn explicit_source(args: &EvaluateArgs) -> Option<CorpusSource> {
    let mut corpus = args.corpus.clone();
    if args.gold.is_some() {
        corpus.data = args.gold.clone();
    }
    (!corpus.input_paths().is_empty()).then(|| corpus.source())
}

fn run_source(dir: &Path) -> Result<CorpusSource> {
    let manifest: RunManifest = read_json(&dir.join(MANIFEST_FILE))
        .with_context(|| format!("{} has no readable run manifest; pass --gold", dir.display()))?;
    serde_json::from_value(manifest.config["corpus"].clone())
        .with_context(|| format!("run manifest in {} names no corpus; pass --gold", dir.display()))
}

pub fn evaluate_run(dir: &Path, gold: &Corpus) -> Result<MetricsReport> {
    let split: SplitResult = read_json(&dir.join(SPLIT_FILE))?;
    let pred = read_predictions(&dir.join(ANNOTATED_FILE))?;
    let train = gold_split(gold, Split::Train)?;
    let (pred, gold) = align_to_gold(pred, train, &split.targets).with_context(|| dir.display().to_string())?;
    Ok(span_prf(&pred, &gold)?)
}

pub fn run(args: EvaluateArgs) -> Result<()> {
    let explicit = explicit_source(&args);
    if let Some(pred_path) = &args.pred {
        let Some(source) = explicit else {
            bail!("--pred needs a gold corpus: pass --gold PATH");
        };
        let mut manifest = ManifestBuilder::start("evaluate");
        let corpus = source.load()?;
        let split: Split = match args.split.as_str() {
            "train" => Split::Train,
            "valid" => Split::Valid,
            _ => Split::Test,
        };
        let gold = gold_split(&corpus, split)?;
        let pred = read_predictions(pred_path)?;
        let ids: Vec<usize> = match &args.split_file {
            Some(f) => read_json::<SplitResult>(f)?.targets,
            None => (0..pred.len()).collect(),
        };
        if args.split_file.is_none() && pred.len() != gold.len() {
            bail!(
                "{} predicted sentences for a {split} split of {}",
                pred.len(),
                gold.len()
            );
        }
        let (pred, gold) = align_to_gold(pred, gold, &ids)?;
        let report = span_prf(&pred, &gold)?;
        print!("{}", metrics_table(&report));
        if let Some(out) = &args.out {
            write_json(out, &report)?;
            manifest.config(serde_json::json!({"gold": source, "split": args.split}));
            manifest.input(pred_path);
            if let Some(f) = &args.split_file {
                manifest.input(f);
            }
            let dir = out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            manifest.finish(&command_manifest(dir, "evaluate"), std::slice::from_ref(out))?;
        }
        return Ok(());
    }

    if args.runs.is_empty() {
        bail!("nothing to evaluate: pass --run DIR or --pred FILE");
    }
    let mut loaded: Vec<(CorpusSource, Corpus)> = Vec::new();
    let mut reports = Vec::new();
    for dir in &args.runs {
        let mut manifest = ManifestBuilder::start("evaluate");
        let source = match &explicit {
            Some(s) => s.clone(),
            None => run_source(dir)?,
        };
        if !loaded.iter().any(|(s, _)| *s == source) {
            let corpus = source.load()?;
            loaded.push((source.clone(), corpus));
        }
        let corpus = &loaded.iter().find(|(s, _)| *s == source).expect("loaded").1;
        let report = evaluate_run(dir, corpus)?;
        let out = dir.join(METRICS_FILE);
        write_json(&out, &report)?;
        manifest.config(serde_json::json!({"gold": source}));
        manifest.input(dir.join(SPLIT_FILE)).input(dir.join(ANNOTATED_FILE));
        manifest.finish(&command_manifest(dir, "evaluate"), &[out])?;
        println!("{}", dir.display());
        print!("{}", metrics_table(&report));
        reports.push(report);
    }
    let aggregate = aggregate_runs(&reports)?;
    if reports.len() > 1 {
        println!(
            "{} runs: P {}  R {}  F1 {}",
            aggregate.runs,
            format_mean_std(&aggregate.precision),
            format_mean_std(&aggregate.recall),
            format_mean_std(&aggregate.f1)
        );
    }
    if let Some(out) = &args.out {
        write_json(out, &aggregate)?;
    }
    Ok(())
}
