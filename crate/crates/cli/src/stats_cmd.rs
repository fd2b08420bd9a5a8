use std::path::{Path, PathBuf};

use annotator::io::write_atomic;
use annotator::stats::{cd_report, conover_posthoc, friedman, rank_scores, Adjust, ScoreMatrix};
use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use crate::manifest::{command_manifest, ManifestBuilder};

pub const FRIEDMAN_FILE: &str = "friedman.json";
pub const CONOVER_CSV: &str = "conover.csv";
pub const CONOVER_JSON: &str = "conover.json";
pub const CD_CSV: &str = "cd.csv";
pub const CD_JSON: &str = "cd.json";

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Score CSV: header row of method names, one row per condition.
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// p-value adjustment: holm, bonferroni or none.
    #[arg(long, default_value = "holm")]
    pub adjust: Adjust,
    /// Output directory; defaults to the directory of the score file.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct FriedmanFile<'a> {
    #[serde(flatten)]
    result: &'a annotator::stats::FriedmanResult,
    alpha: f64,
    /// Whether the Friedman test rejects at `alpha`. The post-hoc files are
    /// written either way.
    rejected: bool,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn pretty(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn run(args: StatsArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("stats");
    let text = std::fs::read_to_string(&args.scores).with_context(|| format!("reading {}", args.scores.display()))?;
    let scores = ScoreMatrix::from_csv(&text).with_context(|| args.scores.display().to_string())?;
    let ranks = rank_scores(&scores);
    let f = friedman(&ranks);
    let conover = conover_posthoc(&ranks, args.alpha, args.adjust)?;
    let cd = cd_report(&conover, &ranks);
    let rejected = f.p_value < args.alpha;
    if !rejected {
        log::warn!(
            "Friedman does not reject at alpha {} (p = {:.4}); post-hoc results are reported anyway",
            args.alpha,
            f.p_value
        );
    }

    let dir = match &args.out {
        Some(d) => d.clone(),
        None => args
            .scores
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf(),
    };
    let files = [
        (
            FRIEDMAN_FILE,
            pretty(&FriedmanFile {
                result: &f,
                alpha: args.alpha,
                rejected,
            })?,
        ),
        (CONOVER_CSV, conover.to_csv()),
        (CONOVER_JSON, pretty(&conover)?),
        (CD_CSV, cd.to_csv()),
        (CD_JSON, pretty(&cd)?),
    ];
    let mut outputs = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        write_text(&path, &body)?;
        outputs.push(path);
    }
    manifest
        .config(serde_json::json!({"alpha": args.alpha, "adjust": args.adjust}))
        .input(&args.scores);
    manifest.finish(&command_manifest(&dir, "stats"), &outputs)?;

    println!(
        "Friedman chi2 = {:.4}, df = {}, p = {:.4e} (N = {}, k = {})",
        f.chi2, f.df, f.p_value, f.n, f.k
    );
    for g in &cd.groups {
        println!(
            "group {}: {} (mean rank {:.2}..{:.2})",
            g.id,
            g.members.join(", "),
            g.lo,
            g.hi
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}
