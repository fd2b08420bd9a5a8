//! Nonparametric comparison of methods across conditions: average ranks,
//! the Friedman test, Conover post-hoc comparisons and critical-difference
//! groups.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("score matrix needs at least 2 {0}")]
    TooSmall(&'static str),
    #[error("row {row} has {found} scores, expected {expected}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("row {row}, column {col}: {reason}")]
    Cell { row: usize, col: usize, reason: String },
    #[error("malformed score csv: {0}")]
    Csv(String),
    #[error("alpha must lie in (0, 1), got {0}")]
    Alpha(f64),
}

/// Scores with one row per condition and one column per method. Higher is
/// better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub methods: Vec<String>,
    pub conditions: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(methods: Vec<String>, conditions: Vec<String>, scores: Vec<Vec<f64>>) -> Result<Self, StatsError> {
        let m = ScoreMatrix {
            methods,
            conditions,
            scores,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if self.methods.len() < 2 {
            return Err(StatsError::TooSmall("methods"));
        }
        if self.scores.len() < 2 {
            return Err(StatsError::TooSmall("conditions"));
        }
        if self.conditions.len() != self.scores.len() {
            return Err(StatsError::Csv(format!(
                "{} condition names for {} rows",
                self.conditions.len(),
                self.scores.len()
            )));
        }
        for (row, r) in self.scores.iter().enumerate() {
            if r.len() != self.methods.len() {
                return Err(StatsError::Ragged {
                    row,
                    expected: self.methods.len(),
                    found: r.len(),
                });
            }
            if let Some(col) = r.iter().position(|v| !v.is_finite()) {
                return Err(StatsError::Cell {
                    row,
                    col,
                    reason: "not a finite number".into(),
                });
            }
        }
        Ok(())
    }

    /// Header row: an ignored corner cell, then method names. Each further
    /// row: condition name, then one score per method.
    pub fn from_csv(text: &str) -> Result<Self, StatsError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| StatsError::Csv(e.to_string()))?;
        let methods: Vec<String> = header.iter().skip(1).map(String::from).collect();
        let mut conditions = Vec::new();
        let mut scores = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| StatsError::Csv(e.to_string()))?;
            let mut cells = record.iter();
            conditions.push(cells.next().unwrap_or_default().to_string());
            let values = cells
                .enumerate()
                .map(|(col, c)| {
                    c.parse::<f64>().map_err(|e| StatsError::Cell {
                        row,
                        col,
                        reason: format!("{c:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            scores.push(values);
        }
        ScoreMatrix::new(methods, conditions, scores)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["condition".to_string()];
        header.extend(self.methods.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (name, row) in self.conditions.iter().zip(&self.scores) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankMatrix {
    pub methods: Vec<String>,
    /// N x k; rank 1 is the best score in its row, ties share the average.
    pub ranks: Vec<Vec<f64>>,
    pub mean_ranks: Vec<f64>,
}

impl RankMatrix {
    pub fn n(&self) -> usize {
        self.ranks.len()
    }

    pub fn k(&self) -> usize {
        self.methods.len()
    }
}

/// Average ranks of one row, best (highest) score first.
pub fn rank_row(row: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    let mut ranks = vec![0.0; row.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && row[order[j + 1]] == row[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the mean of ranks i+1..=j+1.
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}

pub fn rank_scores(m: &ScoreMatrix) -> RankMatrix {
    let ranks: Vec<Vec<f64>> = m.scores.iter().map(|r| rank_row(r)).collect();
    let n = ranks.len() as f64;
    let mean_ranks = (0..m.methods.len())
        .map(|j| ranks.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    RankMatrix {
        methods: m.methods.clone(),
        ranks,
        mean_ranks,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub chi2: f64,
    pub df: usize,
    pub p_value: f64,
    pub n: usize,
    pub k: usize,
    pub methods: Vec<String>,
    pub mean_ranks: Vec<f64>,
}

/// Friedman statistic from mean ranks R̄_j:
/// `12N / (k(k+1)) * Σ R̄_j² - 3N(k+1)`, checked against the rank-sum form
/// `12 / (Nk(k+1)) * Σ R_j² - 3N(k+1)`. No tie correction.
pub fn friedman(r: &RankMatrix) -> FriedmanResult {
    let (n, k) = (r.n() as f64, r.k() as f64);
    let mean_form = 12.0 * n / (k * (k + 1.0)) * r.mean_ranks.iter().map(|x| x * x).sum::<f64>() - 3.0 * n * (k + 1.0);
    let sum_form = 12.0 / (n * k * (k + 1.0))
        * (0..r.k())
            .map(|j| r.ranks.iter().map(|row| row[j]).sum::<f64>().powi(2))
            .sum::<f64>()
        - 3.0 * n * (k + 1.0);
    let scale = 3.0 * n * (k + 1.0);
    assert!(
        (mean_form - sum_form).abs() <= 1e-9 * scale,
        "friedman forms disagree: {mean_form} vs {sum_form}"
    );
    // Cancellation can leave a tiny negative value for all-tied input.
    let chi2 = if mean_form.abs() <= 1e-12 * scale {
        0.0
    } else {
        mean_form.max(0.0)
    };
    let df = r.k() - 1;
    FriedmanResult {
        chi2,
        df,
        p_value: chi2_sf(chi2, df as f64),
        n: r.n(),
        k: r.k(),
        methods: r.methods.clone(),
        mean_ranks: r.mean_ranks.clone(),
    }
}

/// Chi-square survival function, `Q(df/2, x/2)`.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(df / 2.0, x / 2.0)
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 10_000;

/// Regularized upper incomplete gamma `Q(a, x) = Γ(a, x) / Γ(a)`: power
/// series for `P` when `x < a + 1`, Lentz continued fraction for `Q`
/// otherwise.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0, "gamma_q domain: a={a}, x={x}");
    if x == 0.0 {
        return 1.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..GAMMA_MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * GAMMA_EPS {
                break;
            }
        }
        1.0 - sum * log_prefix.exp()
    } else {
        let tiny = f64::MIN_POSITIVE / GAMMA_EPS;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..=GAMMA_MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < GAMMA_EPS {
                break;
            }
        }
        log_prefix.exp() * h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adjust {
    None,
    Bonferroni,
    Holm,
}

impl std::str::FromStr for Adjust {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Adjust::None),
            "bonferroni" => Ok(Adjust::Bonferroni),
            "holm" => Ok(Adjust::Holm),
            other => Err(format!(
                "unknown adjustment `{other}` (expected none, bonferroni or holm)"
            )),
        }
    }
}

/// Adjusted p-values in input order.
pub fn adjust_p(p: &[f64], method: Adjust) -> Vec<f64> {
    let m = p.len() as f64;
    match method {
        Adjust::None => p.to_vec(),
        Adjust::Bonferroni => p.iter().map(|v| (v * m).min(1.0)).collect(),
        Adjust::Holm => {
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
            let mut out = vec![0.0; p.len()];
            let mut running: f64 = 0.0;
            for (i, &idx) in order.iter().enumerate() {
                running = running.max(((m - i as f64) * p[idx]).min(1.0));
                out[idx] = running;
            }
            out
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConoverResult {
    pub methods: Vec<String>,
    /// k x k adjusted p-values; symmetric with a unit diagonal.
    pub p_values: Vec<Vec<f64>>,
    pub alpha: f64,
    pub adjust: Adjust,
    /// Method index sets, ordered by their best mean rank.
    pub groups: Vec<Vec<usize>>,
}

/// Conover's post-hoc test after Friedman. For methods i and j with rank
/// sums R_i, R_j:
///
/// `t = |R_i - R_j| / sqrt(2 (N·A - Σ R²) / ((N-1)(k-1)))`, where A is the
/// sum of all squared ranks, referred to Student's t with (N-1)(k-1)
/// degrees of freedom (two-sided).
pub fn conover_posthoc(r: &RankMatrix, alpha: f64, adjust: Adjust) -> Result<ConoverResult, StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::Alpha(alpha));
    }
    let (n, k) = (r.n(), r.k());
    if k < 2 {
        return Err(StatsError::TooSmall("methods"));
    }
    if n < 2 {
        return Err(StatsError::TooSmall("conditions"));
    }
    let sums: Vec<f64> = (0..k).map(|j| r.ranks.iter().map(|row| row[j]).sum()).collect();
    let a1: f64 = r.ranks.iter().flatten().map(|x| x * x).sum();
    let sum_sq: f64 = sums.iter().map(|x| x * x).sum();
    let df = ((n - 1) * (k - 1)) as f64;
    let var = (2.0 * (n as f64 * a1 - sum_sq) / df).max(0.0);
    let t_dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");

    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let raw: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| {
            let diff = (sums[i] - sums[j]).abs();
            if diff == 0.0 {
                1.0
            } else if var <= 1e-12 * n as f64 * a1 {
                // Every condition ranks the methods identically: the
                // difference has no within-condition variance at all.
                0.0
            } else {
                (2.0 * t_dist.sf(diff / var.sqrt())).min(1.0)
            }
        })
        .collect();
    let adjusted = adjust_p(&raw, adjust);
    let mut p_values = vec![vec![1.0; k]; k];
    for (&(i, j), &p) in pairs.iter().zip(&adjusted) {
        p_values[i][j] = p;
        p_values[j][i] = p;
    }
    let groups = groups_not_different(&p_values, alpha, &r.mean_ranks);
    Ok(ConoverResult {
        methods: r.methods.clone(),
        p_values,
        alpha,
        adjust,
        groups,
    })
}

/// Connected components of the relation `p >= alpha`, members sorted by
/// mean rank and groups by their best member.
fn groups_not_different(p: &[Vec<f64>], alpha: f64, mean_ranks: &[f64]) -> Vec<Vec<usize>> {
    let k = p.len();
    let mut component = vec![usize::MAX; k];
    let mut groups = Vec::new();
    for start in 0..k {
        if component[start] != usize::MAX {
            continue;
        }
        let id = groups.len();
        let mut members = vec![start];
        component[start] = id;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for j in 0..k {
                if component[j] == usize::MAX && p[i][j] >= alpha {
                    component[j] = id;
                    members.push(j);
                    stack.push(j);
                }
            }
        }
        members.sort_by(|&a, &b| mean_ranks[a].total_cmp(&mean_ranks[b]).then(a.cmp(&b)));
        groups.push(members);
    }
    groups.sort_by(|a, b| mean_ranks[a[0]].total_cmp(&mean_ranks[b[0]]).then(a[0].cmp(&b[0])));
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdEntry {
    pub method: String,
    pub mean_rank: f64,
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdGroup {
    pub id: usize,
    pub members: Vec<String>,
    /// Bar extent on the rank axis.
    pub lo: f64,
    pub hi: f64,
}

/// Data behind a critical-difference diagram: methods by ascending mean
/// rank, and one bar per group of methods that are not significantly
/// different.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdReport {
    pub alpha: f64,
    pub adjust: Adjust,
    pub methods: Vec<CdEntry>,
    pub groups: Vec<CdGroup>,
}

pub fn cd_report(c: &ConoverResult, r: &RankMatrix) -> CdReport {
    let mut group_of = vec![0; r.k()];
    for (g, members) in c.groups.iter().enumerate() {
        for &m in members {
            group_of[m] = g;
        }
    }
    let mut order: Vec<usize> = (0..r.k()).collect();
    order.sort_by(|&a, &b| r.mean_ranks[a].total_cmp(&r.mean_ranks[b]).then(a.cmp(&b)));
    CdReport {
        alpha: c.alpha,
        adjust: c.adjust,
        methods: order
            .iter()
            .map(|&i| CdEntry {
                method: r.methods[i].clone(),
                mean_rank: r.mean_ranks[i],
                group: group_of[i],
            })
            .collect(),
        groups: c
            .groups
            .iter()
            .enumerate()
            .map(|(id, members)| {
                let ranks = members.iter().map(|&m| r.mean_ranks[m]);
                CdGroup {
                    id,
                    members: members.iter().map(|&m| r.methods[m].clone()).collect(),
                    lo: ranks.clone().fold(f64::INFINITY, f64::min),
                    hi: ranks.fold(f64::NEG_INFINITY, f64::max),
                }
            })
            .collect(),
    }
}

impl CdReport {
    /// `method,mean_rank,group` rows in rank order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,mean_rank,group\n");
        for e in &self.methods {
            let _ = writeln!(out, "{},{},{}", csv_field(&e.method), e.mean_rank, e.group);
        }
        out
    }
}

impl ConoverResult {
    /// Square p-value matrix with method names on both axes.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for m in &self.methods {
            out.push(',');
            out.push_str(&csv_field(m));
        }
        out.push('\n');
        for (name, row) in self.methods.iter().zip(&self.p_values) {
            out.push_str(&csv_field(name));
            for p in row {
                let _ = write!(out, ",{p}");
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
