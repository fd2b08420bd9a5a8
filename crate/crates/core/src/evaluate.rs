//! Exact-match span precision, recall and F1, plus mean/std over runs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::{extract_entities, Sentence};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("sentence {0} is in the predictions but not in the gold data")]
    UnknownId(usize),
    #[error("sentence {0} is in the gold data but not in the predictions")]
    MissingId(usize),
    #[error("sentence {0} appears more than once")]
    DuplicateId(usize),
    #[error("sentence {id}: {pred} predicted tokens vs {gold} gold tokens")]
    Length { id: usize, pred: usize, gold: usize },
    #[error("no reports to aggregate")]
    NoReports,
}

fn round2<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64((v * 100.0).round() / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(serialize_with = "round2")]
    pub precision: f64,
    #[serde(serialize_with = "round2")]
    pub recall: f64,
    #[serde(serialize_with = "round2")]
    pub f1: f64,
    #[serde(flatten)]
    pub counts: Counts,
}

impl Scores {
    /// Percentages, with 0 for any empty denominator.
    pub fn from_counts(c: Counts) -> Self {
        let pct = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
        let precision = pct(c.tp, c.tp + c.fp);
        let recall = pct(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Scores {
            precision,
            recall,
            f1,
            counts: c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub overall: Scores,
    pub per_category: BTreeMap<String, Scores>,
}

type Triple = (usize, usize, String);

fn triples(s: &Sentence) -> HashSet<Triple> {
    extract_entities(s)
        .into_iter()
        .map(|e| (e.start, e.end, e.category))
        .collect()
}

/// Micro-averaged exact span match. A prediction is a true positive when its
/// start, end and category all equal a gold span. Both sides must cover the
/// same sentence ids with the same token counts; order does not matter.
pub fn span_prf(pred: &[Sentence], gold: &[Sentence]) -> Result<MetricsReport, EvalError> {
    let mut gold_by_id: HashMap<usize, &Sentence> = HashMap::with_capacity(gold.len());
    for g in gold {
        if gold_by_id.insert(g.id, g).is_some() {
            return Err(EvalError::DuplicateId(g.id));
        }
    }
    let mut seen = HashSet::with_capacity(pred.len());
    let mut overall = Counts::default();
    let mut per_cat: BTreeMap<String, Counts> = BTreeMap::new();
    for p in pred {
        let g = gold_by_id.get(&p.id).ok_or(EvalError::UnknownId(p.id))?;
        if !seen.insert(p.id) {
            return Err(EvalError::DuplicateId(p.id));
        }
        if p.len() != g.len() || p.tags.len() != g.tags.len() {
            return Err(EvalError::Length {
                id: p.id,
                pred: p.len(),
                gold: g.len(),
            });
        }
        let (ps, gs) = (triples(p), triples(g));
        for t in &ps {
            let c = per_cat.entry(t.2.clone()).or_default();
            if gs.contains(t) {
                overall.tp += 1;
                c.tp += 1;
            } else {
                overall.fp += 1;
                c.fp += 1;
            }
        }
        for t in gs.difference(&ps) {
            overall.fn_ += 1;
            per_cat.entry(t.2.clone()).or_default().fn_ += 1;
        }
    }
    if let Some(g) = gold.iter().find(|g| !seen.contains(&g.id)) {
        return Err(EvalError::MissingId(g.id));
    }
    Ok(MetricsReport {
        overall: Scores::from_counts(overall),
        per_category: per_cat.into_iter().map(|(k, c)| (k, Scores::from_counts(c))).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    #[serde(serialize_with = "round2")]
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single run.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub runs: usize,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    /// Always `sample`: std uses n - 1.
    pub std_kind: String,
    /// Set when there is only one run, so std carries no information.
    pub degenerate: bool,
}

fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<RunAggregate, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoReports);
    }
    let pick = |f: fn(&Scores) -> f64| mean_std(&reports.iter().map(|r| f(&r.overall)).collect::<Vec<_>>());
    Ok(RunAggregate {
        runs: reports.len(),
        precision: pick(|s| s.precision),
        recall: pick(|s| s.recall),
        f1: pick(|s| s.f1),
        std_kind: "sample".into(),
        degenerate: reports.len() == 1,
    })
}

/// Aligned P/R/F1 table: an `overall` row, then one row per category.
pub fn metrics_table(report: &MetricsReport) -> String {
    let mut rows = vec![("overall".to_string(), report.overall)];
    rows.extend(report.per_category.iter().map(|(k, v)| (k.clone(), *v)));
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(8);
    let mut out = format!(
        "{:<width$} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6}\n",
        "", "P", "R", "F1", "tp", "fp", "fn"
    );
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{:<width$} {:>7.2} {:>7.2} {:>7.2} {:>6} {:>6} {:>6}",
            name, s.precision, s.recall, s.f1, s.counts.tp, s.counts.fp, s.counts.fn_
        );
    }
    out
}

/// `mean ± std` cell text with two decimals.
pub fn format_mean_std(m: &MeanStd) -> String {
    format!("{:.2} ± {:.2}", m.mean, m.std)
}
