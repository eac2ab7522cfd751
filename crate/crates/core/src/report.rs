//! Ranking tables, cross-model comparisons, and text emitters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::warn;

use crate::error::{RankError, Result};
use crate::fit::FitResult;
use crate::model::{ParameterVector, VarianceComponents};
use crate::normal;
use crate::schedule::{Division, TeamIndex};

/// Normal quantile for the 95% intervals.
pub const Z_95: f64 = 1.96;

/// Variance of the normal that the penalty density resembles.
pub const PENALTY_MATCHED_VARIANCE: f64 = 0.815;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TeamFilter {
    #[default]
    Fbs,
    Fcs,
    All,
}

impl std::str::FromStr for TeamFilter {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fbs" => Ok(TeamFilter::Fbs),
            "fcs" => Ok(TeamFilter::Fcs),
            "all" => Ok(TeamFilter::All),
            other => Err(format!("unknown team filter `{other}`")),
        }
    }
}

impl TeamFilter {
    pub fn keeps(self, d: Division) -> bool {
        match self {
            TeamFilter::Fbs => d == Division::Fbs,
            TeamFilter::Fcs => d == Division::Fcs,
            TeamFilter::All => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingRow {
    pub rank: usize,
    pub team: String,
    pub rating: f64,
    pub std_error: f64,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingTable {
    pub rows: Vec<RankingRow>,
    pub model_label: String,
    pub params: ParameterVector,
    pub notes: Vec<String>,
}

/// Sorts ratings descending, ties by team name, and attaches ±1.96 SE intervals.
pub fn rank_teams(fit: &FitResult, index: &TeamIndex, filter: TeamFilter) -> RankingTable {
    let mut notes = Vec::new();
    if !fit.converged {
        let msg = format!("{} did not converge; ranking the last iterate", fit.config.label());
        warn!("{msg}");
        notes.push(msg);
    }
    let entries = (0..index.len().min(fit.eta_hat.len())).map(|j| TeamEntry {
        team: index.names[j].clone(),
        division: index.divisions[j],
        rating: fit.eta_hat[j],
        cond_var: fit.cond_cov[(j, j)],
    });
    RankingTable::from_entries(entries, fit.config.label(), fit.params.clone(), notes, filter)
}

/// One team's fitted values, as stored in a result file.
#[derive(Debug, Clone, PartialEq)]
pub struct TeamEntry {
    pub team: String,
    pub division: Division,
    pub rating: f64,
    pub cond_var: f64,
}

impl RankingTable {
    pub fn from_entries(
        entries: impl IntoIterator<Item = TeamEntry>,
        model_label: String,
        params: ParameterVector,
        notes: Vec<String>,
        filter: TeamFilter,
    ) -> Self {
        let mut rows: Vec<RankingRow> = entries
            .into_iter()
            .filter(|e| filter.keeps(e.division))
            .map(|e| {
                let se = e.cond_var.max(0.0).sqrt();
                RankingRow {
                    rank: 0,
                    team: e.team,
                    rating: e.rating,
                    std_error: se,
                    low: e.rating - Z_95 * se,
                    high: e.rating + Z_95 * se,
                }
            })
            .collect();
        rows.sort_by(|a, b| b.rating.total_cmp(&a.rating).then_with(|| a.team.cmp(&b.team)));
        for (i, r) in rows.iter_mut().enumerate() {
            r.rank = i + 1;
        }
        Self {
            rows,
            model_label,
            params,
            notes,
        }
    }

    /// Variance estimates as (name, value) pairs.
    pub fn variance_estimates(&self) -> Vec<(&'static str, f64)> {
        match self.params.variance {
            VarianceComponents::Pooled(v) => vec![("sigma2", v)],
            VarianceComponents::Separate { fbs, fcs } => vec![("sigma2_fbs", fbs), ("sigma2_fcs", fcs)],
            VarianceComponents::Penalty => Vec::new(),
        }
    }

    /// Keeps the first `k` rows.
    pub fn top(&self, k: usize) -> RankingTable {
        RankingTable {
            rows: self.rows.iter().take(k).cloned().collect(),
            ..self.clone()
        }
    }

    fn rank_map(&self) -> BTreeMap<&str, &RankingRow> {
        self.rows.iter().map(|r| (r.team.as_str(), r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparedTeam {
    pub team: String,
    pub rank_a: usize,
    pub rank_b: usize,
    pub rating_a: f64,
    pub rating_b: f64,
}

impl ComparedTeam {
    /// rank_b − rank_a; positive means the team fell in table b.
    pub fn rank_delta(&self) -> i64 {
        self.rank_b as i64 - self.rank_a as i64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankComparison {
    pub label_a: String,
    pub label_b: String,
    /// Ordered by rank in table a. Ranks are within the shared teams.
    pub pairs: Vec<ComparedTeam>,
    pub displaced: Vec<String>,
    pub swapped: Vec<(String, String)>,
    pub kendall_tau: f64,
    pub max_displacement: usize,
    pub only_in_a: Vec<String>,
    pub only_in_b: Vec<String>,
    pub top_k: Option<usize>,
}

/// Compares two rankings over their shared teams, optionally restricted to the
/// top `top_k` of table a.
pub fn compare_rankings(a: &RankingTable, b: &RankingTable, top_k: Option<usize>) -> RankComparison {
    let ma = a.rank_map();
    let mb = b.rank_map();
    let shared: BTreeSet<&str> = ma.keys().filter(|t| mb.contains_key(*t)).copied().collect();
    let only_in_a: Vec<String> = ma.keys().filter(|t| !shared.contains(*t)).map(|t| t.to_string()).collect();
    let only_in_b: Vec<String> = mb.keys().filter(|t| !shared.contains(*t)).map(|t| t.to_string()).collect();
    if !only_in_a.is_empty() || !only_in_b.is_empty() {
        warn!(
            "comparing over {} shared teams ({} only in a, {} only in b)",
            shared.len(),
            only_in_a.len(),
            only_in_b.len()
        );
    }
    let rerank = |t: &RankingTable| -> BTreeMap<String, usize> {
        t.rows
            .iter()
            .filter(|r| shared.contains(r.team.as_str()))
            .enumerate()
            .map(|(i, r)| (r.team.clone(), i + 1))
            .collect()
    };
    let ra = rerank(a);
    let rb = rerank(b);
    let mut pairs: Vec<ComparedTeam> = shared
        .iter()
        .map(|&t| ComparedTeam {
            team: t.to_string(),
            rank_a: ra[t],
            rank_b: rb[t],
            rating_a: ma[t].rating,
            rating_b: mb[t].rating,
        })
        .collect();
    pairs.sort_by_key(|p| p.rank_a);
    if let Some(k) = top_k {
        pairs.truncate(k);
    }
    let displaced = pairs
        .iter()
        .filter(|p| p.rank_a != p.rank_b)
        .map(|p| p.team.clone())
        .collect();
    let max_displacement = pairs.iter().map(|p| p.rank_a.abs_diff(p.rank_b)).max().unwrap_or(0);
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut swapped = Vec::new();
    for i in 0..pairs.len() {
        for j in (i + 1)..pairs.len() {
            let da = pairs[i].rank_a as i64 - pairs[j].rank_a as i64;
            let db = pairs[i].rank_b as i64 - pairs[j].rank_b as i64;
            if da * db > 0 {
                concordant += 1;
            } else {
                discordant += 1;
                swapped.push((pairs[i].team.clone(), pairs[j].team.clone()));
            }
        }
    }
    let total = concordant + discordant;
    let kendall_tau = if total == 0 {
        1.0
    } else {
        (concordant - discordant) as f64 / total as f64
    };
    RankComparison {
        label_a: a.model_label.clone(),
        label_b: b.model_label.clone(),
        pairs,
        displaced,
        swapped,
        kendall_tau,
        max_displacement,
        only_in_a,
        only_in_b,
        top_k,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityViolation {
    pub team: String,
    pub rank_pql: usize,
    pub rank_la: usize,
    pub rank_fe: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub teams_checked: usize,
    pub violations: Vec<MonotonicityViolation>,
}

/// Flags teams whose LA rank falls outside the closed range spanned by their PQL and FE ranks.
pub fn monotonicity_report(pql: &RankingTable, la: &RankingTable, fe: &RankingTable) -> MonotonicityReport {
    let (mp, ml, mf) = (pql.rank_map(), la.rank_map(), fe.rank_map());
    let mut violations = Vec::new();
    let mut teams_checked = 0;
    for (team, rp) in &mp {
        let (Some(rl), Some(rf)) = (ml.get(team), mf.get(team)) else {
            continue;
        };
        teams_checked += 1;
        let lo = rp.rank.min(rf.rank);
        let hi = rp.rank.max(rf.rank);
        if rl.rank < lo || rl.rank > hi {
            violations.push(MonotonicityViolation {
                team: team.to_string(),
                rank_pql: rp.rank,
                rank_la: rl.rank,
                rank_fe: rf.rank,
            });
        }
    }
    violations.sort_by_key(|v| v.rank_la);
    MonotonicityReport {
        teams_checked,
        violations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Delimited,
    StructuredText,
    AlignedMarkdown,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "csv" | "delimited" => Ok(Format::Delimited),
            "text" | "structured" | "structured-text" => Ok(Format::StructuredText),
            "md" | "markdown" | "aligned-markdown" => Ok(Format::AlignedMarkdown),
            other => Err(format!("unknown table format `{other}`")),
        }
    }
}

/// Anything [`emit_table`] can print.
pub trait Tabular {
    fn header(&self) -> Vec<String>;
    fn body(&self) -> Vec<Vec<String>>;
    /// (key, value) lines printed after the table in text formats.
    fn footer(&self) -> Vec<(String, String)>;
    fn title(&self) -> String;
}

fn f3(x: f64) -> String {
    format!("{x:.3}")
}

fn f2(x: f64) -> String {
    format!("{x:.2}")
}

impl Tabular for RankingTable {
    fn header(&self) -> Vec<String> {
        ["rank", "team", "rating", "std_error", "low", "high"].map(String::from).to_vec()
    }

    fn body(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| vec![r.rank.to_string(), r.team.clone(), f3(r.rating), f3(r.std_error), f3(r.low), f3(r.high)])
            .collect()
    }

    fn footer(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .variance_estimates()
            .into_iter()
            .map(|(k, v)| (k.to_string(), f2(v)))
            .collect();
        if let Some(b) = self.params.beta {
            out.push(("beta".into(), f2(b)));
        }
        out.extend(self.notes.iter().map(|n| ("note".to_string(), n.clone())));
        out
    }

    fn title(&self) -> String {
        self.model_label.clone()
    }
}

impl Tabular for RankComparison {
    fn header(&self) -> Vec<String> {
        ["team", "rank_a", "rank_b", "rank_delta", "rating_a", "rating_b"]
            .map(String::from)
            .to_vec()
    }

    fn body(&self) -> Vec<Vec<String>> {
        self.pairs
            .iter()
            .map(|p| {
                vec![
                    p.team.clone(),
                    p.rank_a.to_string(),
                    p.rank_b.to_string(),
                    p.rank_delta().to_string(),
                    f3(p.rating_a),
                    f3(p.rating_b),
                ]
            })
            .collect()
    }

    fn footer(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("kendall_tau".to_string(), format!("{:.4}", self.kendall_tau)),
            ("max_displacement".to_string(), self.max_displacement.to_string()),
            ("displaced".to_string(), self.displaced.len().to_string()),
            ("teams".to_string(), self.pairs.len().to_string()),
        ];
        if let Some(k) = self.top_k {
            out.push(("top_k".into(), k.to_string()));
        }
        if !self.only_in_a.is_empty() || !self.only_in_b.is_empty() {
            out.push(("only_in_a".into(), self.only_in_a.len().to_string()));
            out.push(("only_in_b".into(), self.only_in_b.len().to_string()));
        }
        for (x, y) in &self.swapped {
            out.push(("swapped".into(), format!("{x} / {y}")));
        }
        out
    }

    fn title(&self) -> String {
        format!("{} vs {}", self.label_a, self.label_b)
    }
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Renders a table. Output bytes depend only on the table.
pub fn emit_table<T: Tabular>(table: &T, format: Format) -> String {
    let header = table.header();
    let body = table.body();
    match format {
        Format::Delimited => {
            let mut w = csv::Writer::from_writer(Vec::new());
            // writing to a Vec cannot fail
            w.write_record(&header).expect("in-memory write");
            for row in &body {
                w.write_record(row).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
        }
        Format::StructuredText => {
            let mut out = String::new();
            let _ = writeln!(out, "title = {}", quote(&table.title()));
            for (k, v) in table.footer() {
                let _ = writeln!(out, "{k} = {}", quote(&v));
            }
            for row in &body {
                out.push('\n');
                out.push_str("[[row]]\n");
                for (k, v) in header.iter().zip(row) {
                    let _ = writeln!(out, "{k} = {}", quote(v));
                }
            }
            out
        }
        Format::AlignedMarkdown => {
            let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
            for row in &body {
                for (w, c) in width.iter_mut().zip(row) {
                    *w = (*w).max(c.chars().count());
                }
            }
            let numeric: Vec<bool> = (0..header.len())
                .map(|c| !body.is_empty() && body.iter().all(|r| r[c].parse::<f64>().is_ok()))
                .collect();
            let line = |cells: &[String]| {
                let mut s = String::from("|");
                for (i, c) in cells.iter().enumerate() {
                    let pad = width[i] - c.chars().count();
                    if numeric[i] {
                        let _ = write!(s, " {}{} |", " ".repeat(pad), c);
                    } else {
                        let _ = write!(s, " {}{} |", c, " ".repeat(pad));
                    }
                }
                s.push('\n');
                s
            };
            let mut out = format!("### {}\n\n", table.title());
            out.push_str(&line(&header));
            out.push('|');
            for (i, w) in width.iter().enumerate() {
                if numeric[i] {
                    let _ = write!(out, " {}: |", "-".repeat(w - 1));
                } else {
                    let _ = write!(out, " {} |", "-".repeat(*w));
                }
            }
            out.push('\n');
            for row in &body {
                out.push_str(&line(row));
            }
            let footer = table.footer();
            if !footer.is_empty() {
                out.push('\n');
                for (k, v) in footer {
                    let _ = writeln!(out, "{k}: {v}  ");
                }
            }
            out
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Caterpillar,
    Scatter,
    Density,
}

impl std::str::FromStr for PlotKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "caterpillar" => Ok(PlotKind::Caterpillar),
            "scatter" => Ok(PlotKind::Scatter),
            "density" => Ok(PlotKind::Density),
            other => Err(format!("unknown plot kind `{other}`")),
        }
    }
}

/// Normalized penalty density ∝ Φ(x)Φ(−x).
pub fn penalty_density(x: f64) -> f64 {
    static NORM: std::sync::OnceLock<f64> = std::sync::OnceLock::new();
    let c = *NORM.get_or_init(|| {
        // trapezoid rule; the tails beyond ±12 are below 1e-30
        let h = 1e-3;
        (-12_000..=12_000)
            .map(|k| {
                let x = k as f64 * h;
                normal::cdf(x) * normal::cdf(-x) * h
            })
            .sum()
    });
    normal::cdf(x) * normal::cdf(-x) / c
}

fn normal_density(x: f64, mean: f64, var: f64) -> f64 {
    normal::pdf((x - mean) / var.sqrt()) / var.sqrt()
}

/// Plot-ready columns. `penalty` adds the penalty curve and N(0, 0.815) to a density plot.
pub fn emit_plot_data(tables: &[&RankingTable], kind: PlotKind, penalty: bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut put = |rec: Vec<String>| w.write_record(&rec).map_err(RankError::from);
    match kind {
        PlotKind::Caterpillar => {
            put(vec!["model".into(), "team".into(), "rating".into(), "low".into(), "high".into()])?;
            for t in tables {
                for r in &t.rows {
                    put(vec![t.model_label.clone(), r.team.clone(), f3(r.rating), f3(r.low), f3(r.high)])?;
                }
            }
        }
        PlotKind::Scatter => {
            let [a, b] = tables else {
                return Err(RankError::InvalidConfig(format!(
                    "scatter needs exactly two tables, got {}",
                    tables.len()
                )));
            };
            let mb = b.rank_map();
            let missing = a.rows.iter().filter(|r| !mb.contains_key(r.team.as_str())).count();
            if missing > 0 || a.rows.len() != b.rows.len() {
                warn!("scatter restricted to teams present in both tables");
            }
            put(vec!["team".into(), "rating_a".into(), "rating_b".into()])?;
            for r in &a.rows {
                if let Some(rb) = mb.get(r.team.as_str()) {
                    put(vec![r.team.clone(), f3(r.rating), f3(rb.rating)])?;
                }
            }
        }
        PlotKind::Density => {
            let mut names = vec!["x".to_string()];
            let mut curves: Vec<Box<dyn Fn(f64) -> f64>> = Vec::new();
            for t in tables {
                let beta = t.params.beta.unwrap_or(0.0);
                match t.params.variance {
                    VarianceComponents::Pooled(v) => {
                        names.push(format!("{}_fbs", t.model_label));
                        curves.push(Box::new(move |x| normal_density(x, 0.0, v)));
                        if t.params.beta.is_some() {
                            names.push(format!("{}_fcs", t.model_label));
                            curves.push(Box::new(move |x| normal_density(x, -beta, v)));
                        }
                    }
                    VarianceComponents::Separate { fbs, fcs } => {
                        names.push(format!("{}_fbs", t.model_label));
                        curves.push(Box::new(move |x| normal_density(x, 0.0, fbs)));
                        names.push(format!("{}_fcs", t.model_label));
                        curves.push(Box::new(move |x| normal_density(x, -beta, fcs)));
                    }
                    VarianceComponents::Penalty => {}
                }
            }
            if penalty {
                names.push("penalty".into());
                curves.push(Box::new(penalty_density));
                names.push("normal_0.815".into());
                curves.push(Box::new(|x| normal_density(x, 0.0, PENALTY_MATCHED_VARIANCE)));
            }
            put(names)?;
            for k in 0..=320 {
                let x = -4.0 + 0.025 * k as f64;
                let mut rec = vec![f3(x)];
                rec.extend(curves.iter().map(|c| format!("{:.6}", c(x))));
                put(rec)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| RankError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 input"))
}
