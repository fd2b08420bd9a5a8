use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use annotator::annotate::{RunReport, REPORT_FILE};
use annotator::evaluate::{aggregate_runs, format_mean_std, MeanStd, MetricsReport, RunAggregate};
use annotator::io::write_atomic;
use annotator::promptkit::PromptMode;
use annotator::stats::ScoreMatrix;
use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use crate::evaluate_cmd::METRICS_FILE;
use crate::manifest::{command_manifest, ManifestBuilder};

pub const TABLE_FILE: &str = "table.txt";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const SUMMARY_FILE: &str = "report.json";

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directories searched recursively for evaluated runs
    /// (report.json plus metrics.json).
    #[arg(long = "runs", value_name = "DIR", num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// One method configuration: everything about a run except corpus and seed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct MethodKey {
    pub model_id: String,
    /// Context size; `None` for the baseline, which sorts first.
    pub m: Option<usize>,
    /// Sample-space fraction in basis points, so the key is totally ordered.
    pub fraction_bp: u32,
    pub mode: PromptMode,
    pub embedder: Option<String>,
}

impl MethodKey {
    fn of(r: &RunReport) -> Self {
        MethodKey {
            model_id: r.model_id.clone(),
            m: (r.mode != PromptMode::Baseline).then_some(r.m).flatten(),
            fraction_bp: (r.fraction * 10_000.0).round() as u32,
            mode: r.mode,
            embedder: r.embedder.clone(),
        }
    }

    pub fn method_label(&self) -> String {
        match self.mode {
            PromptMode::Baseline => "Baseline".into(),
            PromptMode::Icl => "ICL".into(),
            PromptMode::Rag => match &self.embedder {
                Some(e) => format!("RAG w/{}", e.rsplit('/').next().unwrap_or(e)),
                None => "RAG".into(),
            },
        }
    }

    pub fn fraction(&self) -> String {
        format!("{:.2}", self.fraction_bp as f64 / 10_000.0)
    }

    pub fn context(&self) -> String {
        self.m.map(|m| m.to_string()).unwrap_or_else(|| "-".into())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Cell {
    pub corpus: String,
    pub model_id: String,
    pub method: String,
    pub m: Option<usize>,
    pub fraction: f64,
    pub seeds: Vec<u64>,
    #[serde(flatten)]
    pub aggregate: RunAggregate,
}

/// Directories under `root` (inclusive) that hold an evaluated run.
pub fn find_runs(root: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .follow_links(false)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_dir())
        .map(|e| e.into_path())
        .filter(|d| d.join(REPORT_FILE).is_file() && d.join(METRICS_FILE).is_file())
        .collect();
    dirs.sort();
    dirs
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Table row: model, m, fraction in basis points, mode, embedder.
type RowKey = (String, Option<usize>, u32, PromptMode, Option<String>);

type Grouped = BTreeMap<(MethodKey, String), Vec<(u64, MetricsReport)>>;

fn collect(dirs: &[PathBuf]) -> Result<Grouped> {
    let mut grouped: Grouped = BTreeMap::new();
    for dir in dirs {
        let report: RunReport = read_json(&dir.join(REPORT_FILE))?;
        let metrics: MetricsReport = read_json(&dir.join(METRICS_FILE))?;
        let entry = grouped
            .entry((MethodKey::of(&report), report.corpus.clone()))
            .or_default();
        if entry.iter().any(|(s, _)| *s == report.seed) {
            bail!(
                "{} repeats seed {} of an already collected run with the same configuration",
                dir.display(),
                report.seed
            );
        }
        entry.push((report.seed, metrics));
    }
    Ok(grouped)
}

fn cells(grouped: &Grouped) -> Result<BTreeMap<(MethodKey, String), Cell>> {
    let mut out = BTreeMap::new();
    for ((key, corpus), runs) in grouped {
        let reports: Vec<MetricsReport> = runs.iter().map(|(_, r)| r.clone()).collect();
        let mut seeds: Vec<u64> = runs.iter().map(|(s, _)| *s).collect();
        seeds.sort_unstable();
        out.insert(
            (key.clone(), corpus.clone()),
            Cell {
                corpus: corpus.clone(),
                model_id: key.model_id.clone(),
                method: key.method_label(),
                m: key.m,
                fraction: key.fraction_bp as f64 / 10_000.0,
                seeds,
                aggregate: aggregate_runs(&reports)?,
            },
        );
    }
    Ok(out)
}

fn pad_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

/// Text table with one block per model: rows are (#Ex, fraction, method),
/// and each corpus contributes P, R and F1 columns as `mean ± std`.
pub fn render_table(cells: &BTreeMap<(MethodKey, String), Cell>) -> String {
    let corpora: BTreeSet<&str> = cells.keys().map(|(_, c)| c.as_str()).collect();
    let models: BTreeSet<&str> = cells.keys().map(|(k, _)| k.model_id.as_str()).collect();
    let cell_text = |m: &MeanStd| format_mean_std(m);
    let mut out = String::new();
    for model in models {
        let mut rows = vec![vec!["#Ex".to_string(), "Frac".into(), "Method".into()]];
        let mut header2 = vec![String::new(), String::new(), String::new()];
        for c in &corpora {
            rows[0].extend([c.to_string(), String::new(), String::new()]);
            header2.extend(["P".to_string(), "R".into(), "F1".into()]);
        }
        rows.push(header2);
        let keys: BTreeSet<&MethodKey> = cells.keys().map(|(k, _)| k).filter(|k| k.model_id == model).collect();
        for key in keys {
            let mut row = vec![key.context(), key.fraction(), key.method_label()];
            for c in &corpora {
                match cells.get(&(key.clone(), c.to_string())) {
                    Some(cell) => row.extend([
                        cell_text(&cell.aggregate.precision),
                        cell_text(&cell.aggregate.recall),
                        cell_text(&cell.aggregate.f1),
                    ]),
                    None => row.extend(["-".to_string(), "-".into(), "-".into()]),
                }
            }
            rows.push(row);
        }
        let _ = writeln!(out, "model: {model}");
        out.push_str(&pad_table(&rows));
        out.push('\n');
    }
    out
}

fn csv_line(fields: &[String]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(fields)?;
    Ok(String::from_utf8(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)?)
}

/// Mean F1 per corpus: rows are methods (#Ex, fraction, method), columns
/// are models. Empty cells mean no run.
pub fn render_heatmap(cells: &BTreeMap<(MethodKey, String), Cell>) -> Result<String> {
    let models: BTreeSet<&str> = cells.keys().map(|(k, _)| k.model_id.as_str()).collect();
    let mut rows: BTreeSet<RowKey> = BTreeSet::new();
    for (k, corpus) in cells.keys() {
        rows.insert((corpus.clone(), k.m, k.fraction_bp, k.mode, k.embedder.clone()));
    }
    let mut header = vec!["corpus".to_string(), "m".into(), "fraction".into(), "method".into()];
    header.extend(models.iter().map(|m| m.to_string()));
    let mut out = csv_line(&header)?;
    for (corpus, m, fraction_bp, mode, embedder) in rows {
        let probe = MethodKey {
            model_id: String::new(),
            m,
            fraction_bp,
            mode,
            embedder,
        };
        let mut line = vec![corpus.clone(), probe.context(), probe.fraction(), probe.method_label()];
        for model in &models {
            let key = MethodKey {
                model_id: model.to_string(),
                ..probe.clone()
            };
            line.push(
                cells
                    .get(&(key, corpus.clone()))
                    .map(|c| format!("{:.2}", c.aggregate.f1.mean))
                    .unwrap_or_default(),
            );
        }
        out.push_str(&csv_line(&line)?);
    }
    Ok(out)
}

/// Score matrix for `stats`: one column per method configuration
/// (model + method), one row per condition (corpus, #Ex, fraction), cells
/// mean F1. Baselines have no context size and are left out, as are
/// methods missing any condition.
pub fn score_matrix(cells: &BTreeMap<(MethodKey, String), Cell>) -> Option<ScoreMatrix> {
    let mut table: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for ((k, corpus), cell) in cells {
        if k.mode == PromptMode::Baseline {
            continue;
        }
        let method = format!("{} {}", k.model_id, k.method_label());
        let condition = format!("{corpus} m={} f={}", k.context(), k.fraction());
        table
            .entry(method)
            .or_default()
            .insert(condition, cell.aggregate.f1.mean);
    }
    let conditions: BTreeSet<String> = table.values().flat_map(|c| c.keys().cloned()).collect();
    let (complete, partial): (Vec<_>, Vec<_>) = table
        .into_iter()
        .partition(|(_, cells)| cells.len() == conditions.len());
    for (method, _) in &partial {
        log::warn!("leaving `{method}` out of {SCORES_FILE}: it lacks some conditions");
    }
    let methods: Vec<String> = complete.iter().map(|(m, _)| m.clone()).collect();
    let conditions: Vec<String> = conditions.into_iter().collect();
    let scores = conditions
        .iter()
        .map(|c| complete.iter().map(|(_, cells)| cells[c]).collect())
        .collect();
    ScoreMatrix::new(methods, conditions, scores).ok()
}

pub fn run(args: ReportArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("report");
    let mut dirs: Vec<PathBuf> = args.runs.iter().flat_map(|r| find_runs(r)).collect();
    dirs.sort();
    dirs.dedup();
    if dirs.is_empty() {
        bail!("no evaluated runs (report.json + metrics.json) under {:?}", args.runs);
    }
    let grouped = collect(&dirs)?;
    let cells = cells(&grouped)?;

    let table = render_table(&cells);
    let heatmap = render_heatmap(&cells)?;
    let summary: Vec<&Cell> = cells.values().collect();
    let mut summary_json = serde_json::to_string_pretty(&summary)?;
    summary_json.push('\n');

    let mut outputs = Vec::new();
    for (name, body) in [
        (TABLE_FILE, &table),
        (HEATMAP_FILE, &heatmap),
        (SUMMARY_FILE, &summary_json),
    ] {
        let path = args.out.join(name);
        write_atomic(&path, body.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
        outputs.push(path);
    }
    match score_matrix(&cells) {
        Some(m) => {
            let path = args.out.join(SCORES_FILE);
            write_atomic(&path, m.to_csv().as_bytes()).with_context(|| format!("writing {}", path.display()))?;
            outputs.push(path);
        }
        None => log::warn!("not enough complete method configurations for {SCORES_FILE}"),
    }
    for d in &dirs {
        manifest.input(d.join(REPORT_FILE)).input(d.join(METRICS_FILE));
    }
    manifest.config(serde_json::json!({"runs": args.runs}));
    manifest.finish(&command_manifest(&args.out, "report"), &outputs)?;
    print!("{table}");
    println!("{} runs merged into {}", dirs.len(), args.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use annotator::evaluate::{Counts, Scores};

    fn report(mode: PromptMode, m: Option<usize>, model: &str, corpus: &str) -> RunReport {
        RunReport {
            corpus: corpus.into(),
            mode,
            m,
            fraction: 0.3,
            seed: 1,
            rng_algorithm: String::new(),
            template_version: "v1".into(),
            model_id: model.into(),
            embedder: (mode == PromptMode::Rag).then(|| "local-test/hashed-bag-256".into()),
            sample_space: 3,
            targets: 7,
            parse_status: BTreeMap::new(),
            predictions: 0,
            matched: 0,
            unmatched: 0,
            unmatched_by_reason: BTreeMap::new(),
            field_errors: 0,
            provider_failures: 0,
            failure_rate: 0.0,
        }
    }

    fn metrics(f1: f64) -> MetricsReport {
        MetricsReport {
            overall: Scores {
                precision: f1,
                recall: f1,
                f1,
                counts: Counts::default(),
            },
            per_category: BTreeMap::new(),
        }
    }

    fn grid() -> BTreeMap<(MethodKey, String), Cell> {
        let mut g: Grouped = BTreeMap::new();
        let mut add = |mode, m, model: &str, corpus: &str, seed, f1| {
            let mut r = report(mode, m, model, corpus);
            r.seed = seed;
            g.entry((MethodKey::of(&r), corpus.to_string()))
                .or_default()
                .push((seed, metrics(f1)));
        };
        for (corpus, base) in [("conll", 80.0), ("wnut", 50.0)] {
            add(PromptMode::Baseline, None, "a", corpus, 1, base - 10.0);
            for m in [25, 50] {
                add(PromptMode::Icl, Some(m), "a", corpus, 1, base);
                add(PromptMode::Icl, Some(m), "a", corpus, 2, base + 2.0);
                add(PromptMode::Rag, Some(m), "a", corpus, 1, base + 5.0);
            }
        }
        add(PromptMode::Rag, Some(25), "b", "conll", 1, 70.0);
        cells(&g).unwrap()
    }

    #[test]
    fn table_lists_models_and_corpora() {
        let t = render_table(&grid());
        assert!(t.contains("model: a") && t.contains("model: b"));
        assert!(t.contains("conll") && t.contains("wnut"));
        assert!(t.contains("81.00 ± 1.41"), "{t}");
        let baseline = t.lines().find(|l| l.contains("Baseline")).unwrap();
        assert!(baseline.starts_with('-'));
    }

    #[test]
    fn heatmap_has_methods_as_rows_and_models_as_columns() {
        let h = render_heatmap(&grid()).unwrap();
        let mut lines = h.lines();
        assert_eq!(lines.next().unwrap(), "corpus,m,fraction,method,a,b");
        assert!(h.contains("conll,25,0.30,RAG w/hashed-bag-256,85.00,70.00"), "{h}");
        assert!(h.contains("wnut,25,0.30,RAG w/hashed-bag-256,55.00,\n"), "{h}");
        assert_eq!(h.lines().count(), 1 + 2 * 5);
    }

    #[test]
    fn scores_keep_only_complete_methods() {
        let m = score_matrix(&grid()).unwrap();
        assert_eq!(m.methods, ["a ICL", "a RAG w/hashed-bag-256"]);
        assert_eq!(m.conditions.len(), 4);
        assert_eq!(m.scores[0], [81.0, 85.0]);
    }

    #[test]
    fn finds_nested_run_directories() {
        let dir = tempfile::tempdir().unwrap();
        for sub in ["x/seed-1", "x/seed-2", "y"] {
            let d = dir.path().join(sub);
            std::fs::create_dir_all(&d).unwrap();
            std::fs::write(d.join(REPORT_FILE), "{}").unwrap();
            if sub != "y" {
                std::fs::write(d.join(METRICS_FILE), "{}").unwrap();
            }
        }
        assert_eq!(find_runs(dir.path()).len(), 2);
    }
}
