//! Game records, cleaning, and the multi-membership design.
//!
//! Every game contributes one row to Z with +1 in the home team's column and
//! -1 in the visitor's column. The FCS indicator X is 1 exactly when an FCS
//! team visits an FBS team.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use chrono::NaiveDate;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{RankError, Result};

/// Column name of the consolidated FCS pseudo-team.
pub const FCS_POOL_NAME: &str = "FCS (pooled)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Division {
    Fbs,
    Fcs,
}

impl fmt::Display for Division {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Division::Fbs => write!(f, "FBS"),
            Division::Fcs => write!(f, "FCS"),
        }
    }
}

impl std::str::FromStr for Division {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "FBS" | "I-A" | "1A" => Ok(Division::Fbs),
            "FCS" | "I-AA" | "1AA" => Ok(Division::Fcs),
            other => Err(format!("unknown division `{other}`")),
        }
    }
}

/// How FCS opponents enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FcsMode {
    /// All FCS teams share one pseudo-team column; no fixed effect.
    Consolidated,
    /// Separate FCS population sharing the FBS variance.
    Pooled,
    /// Separate FCS population with its own variance.
    Separate,
}

impl FcsMode {
    pub fn digit(self) -> u8 {
        match self {
            FcsMode::Consolidated => 0,
            FcsMode::Pooled => 1,
            FcsMode::Separate => 2,
        }
    }

    pub fn from_digit(d: u8) -> Option<Self> {
        match d {
            0 => Some(FcsMode::Consolidated),
            1 => Some(FcsMode::Pooled),
            2 => Some(FcsMode::Separate),
            _ => None,
        }
    }

    pub fn has_fixed_effect(self) -> bool {
        !matches!(self, FcsMode::Consolidated)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameRecord {
    pub date: NaiveDate,
    pub home: String,
    pub away: String,
    pub home_win: bool,
    pub fcs_visit: bool,
    pub neutral_site: bool,
}

impl GameRecord {
    pub fn winner(&self) -> &str {
        if self.home_win {
            &self.home
        } else {
            &self.away
        }
    }
}

/// Maps file columns onto [`GameRecord`] fields.
///
/// Either `outcome` or both score columns must be present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMapping {
    pub delimiter: u8,
    pub date: String,
    pub date_format: String,
    pub home: String,
    pub away: String,
    pub outcome: Option<String>,
    pub home_score: Option<String>,
    pub away_score: Option<String>,
    pub fcs: Option<String>,
    pub neutral: Option<String>,
}

impl Default for ColumnMapping {
    /// The processed-season layout: `home, Game Date, away, home_score, away_score, fcs, ...`.
    fn default() -> Self {
        Self {
            delimiter: b',',
            date: "Game Date".into(),
            date_format: "%m/%d/%Y".into(),
            home: "home".into(),
            away: "away".into(),
            outcome: None,
            home_score: Some("home_score".into()),
            away_score: Some("away_score".into()),
            fcs: Some("fcs".into()),
            neutral: None,
        }
    }
}

pub const CANONICAL_HEADER: [&str; 6] = ["date", "home", "away", "home_win", "fcs", "neutral"];

impl ColumnMapping {
    /// Layout written by [`write_games`].
    pub fn canonical() -> Self {
        Self {
            delimiter: b',',
            date: "date".into(),
            date_format: "%Y-%m-%d".into(),
            home: "home".into(),
            away: "away".into(),
            outcome: Some("home_win".into()),
            home_score: None,
            away_score: None,
            fcs: Some("fcs".into()),
            neutral: Some("neutral".into()),
        }
    }

    /// Parses `key = value` lines (`#` starts a comment). Unknown keys are rejected.
    pub fn from_key_value(text: &str) -> Result<Self> {
        let mut m = ColumnMapping::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| RankError::Parse {
                row: lineno + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            let value = value.trim().trim_matches('"').to_string();
            let opt = |v: String| if v.is_empty() { None } else { Some(v) };
            match key.trim() {
                "delimiter" => {
                    m.delimiter = match value.as_str() {
                        "tab" | "\\t" => b'\t',
                        v if v.len() == 1 => v.as_bytes()[0],
                        v => {
                            return Err(RankError::Parse {
                                row: lineno + 1,
                                message: format!("delimiter must be one byte, got `{v}`"),
                            })
                        }
                    }
                }
                "date" => m.date = value,
                "date_format" => m.date_format = value,
                "home" => m.home = value,
                "away" => m.away = value,
                "outcome" => m.outcome = opt(value),
                "home_score" => m.home_score = opt(value),
                "away_score" => m.away_score = opt(value),
                "fcs" => m.fcs = opt(value),
                "neutral" => m.neutral = opt(value),
                other => {
                    return Err(RankError::Parse {
                        row: lineno + 1,
                        message: format!("unknown mapping key `{other}`"),
                    })
                }
            }
        }
        Ok(m)
    }

    /// Picks the canonical mapping when the header matches it, else the default layout.
    pub fn detect(text: &str) -> Self {
        let header = text.lines().next().unwrap_or("");
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols == CANONICAL_HEADER {
            Self::canonical()
        } else {
            Self::default()
        }
    }
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" | "t" => Some(true),
        "0" | "false" | "no" | "n" | "f" | "" => Some(false),
        _ => None,
    }
}

/// One [`GameRecord`] per data row. Rows are numbered as file lines (header = 1).
pub fn parse_games(text: &str, mapping: &ColumnMapping) -> Result<Vec<GameRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(mapping.delimiter)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| RankError::MissingColumn(name.to_string()))
    };
    let opt_col = |name: &Option<String>| -> Result<Option<usize>> {
        name.as_ref().map(|n| col(n)).transpose()
    };
    let date_col = col(&mapping.date)?;
    let home_col = col(&mapping.home)?;
    let away_col = col(&mapping.away)?;
    let outcome_col = opt_col(&mapping.outcome)?;
    let scores = match (&mapping.home_score, &mapping.away_score) {
        (Some(h), Some(a)) => Some((col(h)?, col(a)?)),
        _ => None,
    };
    if outcome_col.is_none() && scores.is_none() {
        return Err(RankError::MissingColumn("outcome or home_score/away_score".into()));
    }
    let fcs_col = opt_col(&mapping.fcs)?;
    let neutral_col = opt_col(&mapping.neutral)?;

    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| RankError::Parse {
            row,
            message: e.to_string(),
        })?;
        let field = |c: usize| -> Result<&str> {
            rec.get(c).ok_or_else(|| RankError::Parse {
                row,
                message: format!("missing field {}", c + 1),
            })
        };
        let bad = |message: String| RankError::Parse { row, message };

        let date_str = field(date_col)?;
        let date = NaiveDate::parse_from_str(date_str, &mapping.date_format)
            .map_err(|e| bad(format!("bad date `{date_str}`: {e}")))?;
        let home = field(home_col)?.to_string();
        let away = field(away_col)?.to_string();
        if home.is_empty() || away.is_empty() {
            return Err(bad("empty team name".into()));
        }
        if home == away {
            return Err(bad(format!("team `{home}` plays itself")));
        }
        let home_win = if let Some(c) = outcome_col {
            let v = field(c)?;
            parse_flag(v).ok_or_else(|| bad(format!("bad outcome `{v}`")))?
        } else {
            let (hc, ac) = scores.expect("checked above");
            let hs: i64 = field(hc)?
                .parse()
                .map_err(|e| bad(format!("bad home score: {e}")))?;
            let aw: i64 = field(ac)?
                .parse()
                .map_err(|e| bad(format!("bad away score: {e}")))?;
            if hs == aw {
                return Err(RankError::Tie {
                    row,
                    home,
                    away,
                    score: hs,
                });
            }
            hs > aw
        };
        let flag = |c: Option<usize>, what: &str| -> Result<bool> {
            match c {
                None => Ok(false),
                Some(c) => {
                    let v = field(c)?;
                    parse_flag(v).ok_or_else(|| bad(format!("bad {what} flag `{v}`")))
                }
            }
        };
        let fcs_visit = flag(fcs_col, "fcs")?;
        let neutral_site = flag(neutral_col, "neutral")?;
        out.push(GameRecord {
            date,
            home,
            away,
            home_win,
            fcs_visit,
            neutral_site,
        });
    }
    Ok(out)
}

/// Team name to division.
pub type Roster = BTreeMap<String, Division>;

/// Roster file: header `team,division`, one team per row.
pub fn parse_roster(text: &str) -> Result<Roster> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let team_col = headers
        .iter()
        .position(|h| h == "team")
        .ok_or_else(|| RankError::MissingColumn("team".into()))?;
    let div_col = headers
        .iter()
        .position(|h| h == "division")
        .ok_or_else(|| RankError::MissingColumn("division".into()))?;
    let mut roster = Roster::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| RankError::Parse {
            row,
            message: e.to_string(),
        })?;
        let team = rec.get(team_col).unwrap_or("").to_string();
        let div: Division = rec
            .get(div_col)
            .unwrap_or("")
            .parse()
            .map_err(|message| RankError::Parse { row, message })?;
        if team.is_empty() {
            return Err(RankError::Parse {
                row,
                message: "empty team name".into(),
            });
        }
        roster.insert(team, div);
    }
    Ok(roster)
}

pub fn write_roster(roster: &Roster) -> String {
    let mut out = String::from("team,division\n");
    for (team, div) in roster {
        out.push_str(&csv_field(team));
        out.push(',');
        out.push_str(&div.to_string());
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Canonical game file: ISO dates, sorted by date then home team.
pub fn write_games(records: &[GameRecord]) -> String {
    let mut sorted: Vec<&GameRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (a.date, &a.home, &a.away).cmp(&(b.date, &b.home, &b.away)));
    let mut out = CANONICAL_HEADER.join(",");
    out.push('\n');
    for g in sorted {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            g.date.format("%Y-%m-%d"),
            csv_field(&g.home),
            csv_field(&g.away),
            u8::from(g.home_win),
            u8::from(g.fcs_visit),
            u8::from(g.neutral_site)
        ));
    }
    out
}

/// Cleans raw per-team records into one record per game.
///
/// Drops games with a team missing from the roster and games after `cutoff`,
/// orients every FBS-FCS game with the FBS team at home (the model has no
/// home effect, so the orientation only fixes the sign of X), recomputes the
/// FCS-visit flag, and collapses duplicates keyed on (unordered pair, date).
pub fn preprocess_raw(
    records: &[GameRecord],
    roster: &Roster,
    cutoff: NaiveDate,
) -> Result<Vec<GameRecord>> {
    let mut kept: Vec<GameRecord> = Vec::with_capacity(records.len());
    let mut seen: HashMap<(String, String, NaiveDate), usize> = HashMap::new();
    for rec in records {
        if rec.date > cutoff {
            continue;
        }
        let (Some(&dh), Some(&da)) = (roster.get(&rec.home), roster.get(&rec.away)) else {
            continue;
        };
        let mut g = rec.clone();
        if dh == Division::Fcs && da == Division::Fbs {
            std::mem::swap(&mut g.home, &mut g.away);
            g.home_win = !g.home_win;
        }
        g.fcs_visit = dh != da;
        let key = if g.home < g.away {
            (g.home.clone(), g.away.clone(), g.date)
        } else {
            (g.away.clone(), g.home.clone(), g.date)
        };
        match seen.get(&key) {
            Some(&idx) => {
                if kept[idx].winner() != g.winner() {
                    return Err(RankError::DataIntegrity {
                        team_a: key.0,
                        team_b: key.1,
                        date: key.2.to_string(),
                    });
                }
            }
            None => {
                seen.insert(key, kept.len());
                kept.push(g);
            }
        }
    }
    kept.sort_by(|a, b| (a.date, &a.home, &a.away).cmp(&(b.date, &b.home, &b.away)));
    Ok(kept)
}

/// Dense team numbering: FBS teams at 0..p, FCS teams (or the pooled pseudo-team) at p..p+q.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamIndex {
    pub names: Vec<String>,
    pub divisions: Vec<Division>,
    pub p: usize,
    pub q: usize,
    /// Roster teams left without games after filtering.
    pub excluded: Vec<String>,
}

impl TeamIndex {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Builds an index from explicit FBS and FCS name lists (kept in the given order).
    pub fn from_lists(fbs: Vec<String>, fcs: Vec<String>) -> Self {
        let p = fbs.len();
        let q = fcs.len();
        let mut divisions = vec![Division::Fbs; p];
        divisions.extend(std::iter::repeat_n(Division::Fcs, q));
        let mut names = fbs;
        names.extend(fcs);
        Self {
            names,
            divisions,
            p,
            q,
            excluded: Vec::new(),
        }
    }
}

/// Sparse multi-membership design: each row stores its (+1 column, -1 column).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    n_cols: usize,
    /// Columns 0..fbs_cols belong to the FBS population.
    fbs_cols: usize,
    rows: Vec<(usize, usize)>,
    x: Option<Vec<f64>>,
    /// Unique unordered team pairs that met; the Hessian's off-diagonal pattern.
    pairs: Vec<(usize, usize)>,
    row_pair: Vec<usize>,
}

impl DesignMatrices {
    pub fn new(n_cols: usize, rows: Vec<(usize, usize)>, x: Option<Vec<f64>>) -> Result<Self> {
        if let Some(x) = &x {
            if x.len() != rows.len() {
                return Err(RankError::Dimension(format!(
                    "X has {} entries for {} games",
                    x.len(),
                    rows.len()
                )));
            }
        }
        let mut pair_ids: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut row_pair = Vec::with_capacity(rows.len());
        for &(h, a) in &rows {
            if h >= n_cols || a >= n_cols || h == a {
                return Err(RankError::Dimension(format!(
                    "bad design row ({h}, {a}) for {n_cols} columns"
                )));
            }
            let key = (h.min(a), h.max(a));
            let next = pair_ids.len();
            row_pair.push(*pair_ids.entry(key).or_insert(next));
        }
        let mut pairs = vec![(0, 0); pair_ids.len()];
        for (k, id) in pair_ids {
            pairs[id] = k;
        }
        Ok(Self {
            n_cols,
            fbs_cols: n_cols,
            rows,
            x,
            pairs,
            row_pair,
        })
    }

    /// Marks columns `fbs_cols..` as the FCS population.
    pub fn with_fbs_cols(mut self, fbs_cols: usize) -> Self {
        self.fbs_cols = fbs_cols.min(self.n_cols);
        self
    }

    pub fn fbs_cols(&self) -> usize {
        self.fbs_cols
    }

    pub fn n_games(&self) -> usize {
        self.rows.len()
    }

    pub fn n_teams(&self) -> usize {
        self.n_cols
    }

    /// (home column, away column) of game `i`.
    pub fn row(&self, i: usize) -> (usize, usize) {
        self.rows[i]
    }

    pub fn rows(&self) -> &[(usize, usize)] {
        &self.rows
    }

    pub fn x(&self) -> Option<&[f64]> {
        self.x.as_deref()
    }

    pub fn x_at(&self, i: usize) -> f64 {
        self.x.as_ref().map_or(0.0, |x| x[i])
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn row_pair(&self, i: usize) -> usize {
        self.row_pair[i]
    }

    /// Z as a dense matrix, mostly for tests and small oracles.
    pub fn z_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut z = nalgebra::DMatrix::zeros(self.rows.len(), self.n_cols);
        for (i, &(h, a)) in self.rows.iter().enumerate() {
            z[(i, h)] = 1.0;
            z[(i, a)] = -1.0;
        }
        z
    }

    /// Same design restricted to the given rows.
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        let rows = keep.iter().map(|&i| self.rows[i]).collect();
        let x = self.x.as_ref().map(|x| keep.iter().map(|&i| x[i]).collect());
        Ok(Self::new(self.n_cols, rows, x)?.with_fbs_cols(self.fbs_cols))
    }
}

#[derive(Debug, Clone)]
pub struct BuiltDesign {
    pub design: DesignMatrices,
    pub index: TeamIndex,
    pub outcomes: Vec<bool>,
    /// Positions in the input records that made it into the design.
    pub record_rows: Vec<usize>,
}

/// Builds Z (and X outside consolidated mode) from preprocessed records.
pub fn build_design(records: &[GameRecord], roster: &Roster, mode: FcsMode) -> Result<BuiltDesign> {
    let division = |name: &str| -> Result<Division> {
        roster
            .get(name)
            .copied()
            .ok_or_else(|| RankError::InvalidConfig(format!("team `{name}` missing from roster")))
    };
    let mut used_rows = Vec::new();
    let mut fbs: BTreeSet<String> = BTreeSet::new();
    let mut fcs: BTreeSet<String> = BTreeSet::new();
    for (i, g) in records.iter().enumerate() {
        let dh = division(&g.home)?;
        let da = division(&g.away)?;
        if mode == FcsMode::Consolidated && dh == Division::Fcs && da == Division::Fcs {
            continue;
        }
        used_rows.push(i);
        for (name, d) in [(&g.home, dh), (&g.away, da)] {
            match d {
                Division::Fbs => fbs.insert(name.clone()),
                Division::Fcs => fcs.insert(name.clone()),
            };
        }
    }
    let excluded: Vec<String> = roster
        .keys()
        .filter(|t| !fbs.contains(*t) && !fcs.contains(*t))
        .cloned()
        .collect();
    if !excluded.is_empty() {
        let shown: Vec<&str> = excluded.iter().take(3).map(String::as_str).collect();
        let more = if excluded.len() > 3 { ", ..." } else { "" };
        warn!(
            "{} roster teams have no games after filtering and are excluded ({}{more})",
            excluded.len(),
            shown.join(", ")
        );
    }
    if fbs.len() < 2 {
        return Err(RankError::TooFewTeams(fbs.len()));
    }
    let fcs_list: Vec<String> = match mode {
        FcsMode::Consolidated if !fcs.is_empty() => vec![FCS_POOL_NAME.to_string()],
        FcsMode::Consolidated => Vec::new(),
        _ => fcs.iter().cloned().collect(),
    };
    let mut index = TeamIndex::from_lists(fbs.into_iter().collect(), fcs_list);
    index.excluded = excluded;
    let lookup: HashMap<&str, usize> = index
        .names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let col = |name: &str| -> usize {
        match (mode, roster[name]) {
            (FcsMode::Consolidated, Division::Fcs) => index.p,
            _ => lookup[name],
        }
    };
    let mut rows = Vec::with_capacity(used_rows.len());
    let mut x = Vec::with_capacity(used_rows.len());
    let mut outcomes = Vec::with_capacity(used_rows.len());
    for &i in &used_rows {
        let g = &records[i];
        rows.push((col(&g.home), col(&g.away)));
        let visit = roster[&g.home] == Division::Fbs && roster[&g.away] == Division::Fcs;
        x.push(if visit { 1.0 } else { 0.0 });
        outcomes.push(g.home_win);
    }
    let x = mode.has_fixed_effect().then_some(x);
    let design = DesignMatrices::new(index.len(), rows, x)?.with_fbs_cols(index.p);
    Ok(BuiltDesign {
        design,
        index,
        outcomes,
        record_rows: used_rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparationReport {
    pub cross_division_games: usize,
    pub fcs_wins: usize,
    /// Every FBS-FCS game was won by the FBS team (or there were none).
    pub separated: bool,
    pub undefeated: Vec<String>,
    pub winless: Vec<String>,
    pub recommendation: Option<String>,
}

/// Checks whether the FCS fixed effect has a finite estimate.
pub fn detect_separation(records: &[GameRecord]) -> SeparationReport {
    let mut cross = 0;
    let mut fcs_wins = 0;
    let mut record: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for g in records {
        if g.fcs_visit {
            cross += 1;
            if !g.home_win {
                fcs_wins += 1;
            }
        }
        let (w, l) = if g.home_win {
            (&g.home, &g.away)
        } else {
            (&g.away, &g.home)
        };
        record.entry(w).or_default().0 += 1;
        record.entry(l).or_default().1 += 1;
    }
    let undefeated = record
        .iter()
        .filter(|(_, &(_, l))| l == 0)
        .map(|(t, _)| t.to_string())
        .collect();
    let winless = record
        .iter()
        .filter(|(_, &(w, _))| w == 0)
        .map(|(t, _)| t.to_string())
        .collect();
    let separated = fcs_wins == 0;
    let recommendation = separated.then(|| {
        "FBS teams won every FBS-FCS game: drop the FCS effect and FCS teams (use consolidated mode or remove them)"
            .to_string()
    });
    SeparationReport {
        cross_division_games: cross,
        fcs_wins,
        separated,
        undefeated,
        winless,
        recommendation,
    }
}

/// Wins and losses per team name.
pub fn win_loss(records: &[GameRecord]) -> BTreeMap<String, (usize, usize)> {
    let mut out: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for g in records {
        let (w, l) = if g.home_win {
            (&g.home, &g.away)
        } else {
            (&g.away, &g.home)
        };
        out.entry(w.clone()).or_default().0 += 1;
        out.entry(l.clone()).or_default().1 += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn game(date: &str, home: &str, away: &str, home_win: bool) -> GameRecord {
        GameRecord {
            date: d(date),
            home: home.into(),
            away: away.into(),
            home_win,
            fcs_visit: false,
            neutral_site: false,
        }
    }

    const TABLE9: &str = "home,Game Date,away,home_score,away_score,fcs\n\
        Ball St.,8/28/2008,Northeastern,48,14,1\n\
        Baylor,8/28/2008,Wake Forest,13,41,0\n\
        Buffalo,8/28/2008,UTEP,42,17,0\n";

    #[test]
    fn parses_processed_season_rows() {
        let games = parse_games(TABLE9, &ColumnMapping::default()).unwrap();
        assert_eq!(games.len(), 3);
        assert_eq!(games[0].home, "Ball St.");
        assert_eq!(games[0].away, "Northeastern");
        assert!(games[0].home_win);
        assert!(games[0].fcs_visit);
        assert_eq!(games[0].date, d("2008-08-28"));
        assert!(!games[1].home_win, "Baylor lost 13-41");
    }

    #[test]
    fn empty_file_after_header() {
        let games = parse_games("home,Game Date,away,home_score,away_score,fcs\n", &ColumnMapping::default()).unwrap();
        assert!(games.is_empty());
    }

    #[test]
    fn ties_and_malformed_rows_rejected() {
        let tie = "home,Game Date,away,home_score,away_score,fcs\nA,8/28/2008,B,10,10,0\n";
        match parse_games(tie, &ColumnMapping::default()) {
            Err(RankError::Tie { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected tie error, got {other:?}"),
        }
        let bad = "home,Game Date,away,home_score,away_score,fcs\nA,8/28/2008,B,10,3,0\nC,notadate,D,1,2,0\n";
        match parse_games(bad, &ColumnMapping::default()) {
            Err(RankError::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let missing = "home,away\nA,B\n";
        assert!(matches!(
            parse_games(missing, &ColumnMapping::default()),
            Err(RankError::MissingColumn(_))
        ));
    }

    #[test]
    fn mapping_from_key_value() {
        let m = ColumnMapping::from_key_value(
            "# tab separated\ndelimiter = tab\ndate=when\ndate_format=%Y-%m-%d\noutcome=won\nhome_score=\naway_score=\n",
        )
        .unwrap();
        assert_eq!(m.delimiter, b'\t');
        let text = "home\twhen\taway\twon\tfcs\nA\t2010-09-01\tB\t0\t0\n";
        let games = parse_games(text, &m).unwrap();
        assert_eq!(games[0].winner(), "B");
        assert!(ColumnMapping::from_key_value("colour=blue").is_err());
    }

    fn roster() -> Roster {
        [
            ("A", Division::Fbs),
            ("B", Division::Fbs),
            ("C", Division::Fbs),
            ("X", Division::Fcs),
            ("Y", Division::Fcs),
        ]
        .into_iter()
        .map(|(t, d)| (t.to_string(), d))
        .collect()
    }

    #[test]
    fn mirror_records_collapse() {
        let recs = vec![
            game("2008-09-01", "A", "B", true),
            game("2008-09-01", "B", "A", false),
        ];
        let out = preprocess_raw(&recs, &roster(), d("2008-12-31")).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn lower_division_and_late_games_dropped() {
        let recs = vec![
            game("2008-09-01", "X", "Div II State", true),
            game("2008-09-02", "A", "B", true),
            game("2009-01-02", "A", "C", true),
        ];
        let out = preprocess_raw(&recs, &roster(), d("2008-12-31")).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].home, "A");
    }

    #[test]
    fn contradictory_duplicate_is_an_error() {
        let recs = vec![
            game("2008-09-01", "A", "B", true),
            game("2008-09-01", "B", "A", true),
        ];
        let err = preprocess_raw(&recs, &roster(), d("2008-12-31")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("A") && msg.contains("B") && msg.contains("2008-09-01"), "{msg}");
    }

    #[test]
    fn cross_division_games_oriented_fbs_home() {
        let recs = vec![game("2008-09-01", "X", "A", true)];
        let out = preprocess_raw(&recs, &roster(), d("2008-12-31")).unwrap();
        assert_eq!(out[0].home, "A");
        assert_eq!(out[0].away, "X");
        assert!(!out[0].home_win);
        assert!(out[0].fcs_visit);
    }

    #[test]
    fn design_rows_for_visit() {
        // away team C visits home team A
        let recs = vec![
            game("2008-09-01", "A", "C", true),
            game("2008-09-02", "B", "C", false),
            game("2008-09-03", "A", "B", true),
        ];
        let built = build_design(&recs, &roster(), FcsMode::Pooled).unwrap();
        let a = built.index.position("A").unwrap();
        let c = built.index.position("C").unwrap();
        assert_eq!(built.design.row(0), (a, c));
        let z = built.design.z_dense();
        assert_eq!(z.nrows(), 3);
        assert_eq!(z.ncols(), 3);
        for i in 0..3 {
            assert_eq!(z.row(i).sum(), 0.0);
        }
        assert_eq!(built.index.excluded, vec!["X".to_string(), "Y".to_string()]);
    }

    #[test]
    fn consolidated_mode_pools_fcs_opponents() {
        let mut recs = vec![
            game("2008-09-01", "A", "X", true),
            game("2008-09-02", "B", "Y", false),
            game("2008-09-03", "X", "Y", true),
            game("2008-09-04", "A", "B", true),
        ];
        for r in &mut recs[..2] {
            r.fcs_visit = true;
        }
        let built = build_design(&recs, &roster(), FcsMode::Consolidated).unwrap();
        assert_eq!(built.index.p, 2);
        assert_eq!(built.index.q, 1);
        assert_eq!(built.design.n_games(), 3, "FCS-FCS game discarded");
        assert_eq!(built.design.row(0).1, 2);
        assert_eq!(built.design.row(1).1, 2);
        assert!(built.design.x().is_none());
        assert_eq!(built.index.names[2], FCS_POOL_NAME);

        let sep = build_design(&recs, &roster(), FcsMode::Separate).unwrap();
        assert_eq!(sep.design.n_games(), 4);
        assert_eq!(sep.design.x().unwrap(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(sep.index.q, 2);
    }

    #[test]
    fn separation_cases() {
        let mut recs = vec![
            game("2008-09-01", "A", "X", true),
            game("2008-09-02", "B", "Y", true),
            game("2008-09-03", "A", "B", true),
        ];
        recs[0].fcs_visit = true;
        recs[1].fcs_visit = true;
        let rep = detect_separation(&recs);
        assert!(rep.separated);
        assert!(rep.recommendation.is_some());
        assert_eq!(rep.undefeated, vec!["A".to_string()]);
        recs[1].home_win = false;
        assert!(!detect_separation(&recs).separated);
        let none = detect_separation(&recs[2..]);
        assert!(none.separated, "no cross-division information");
        assert_eq!(none.cross_division_games, 0);
    }

    #[test]
    fn canonical_roundtrip() {
        let recs = vec![game("2008-09-02", "B", "A", false), game("2008-09-01", "A, Jr.", "C", true)];
        let text = write_games(&recs);
        assert!(text.starts_with("date,home,away,home_win,fcs,neutral\n2008-09-01,\"A, Jr.\""));
        let back = parse_games(&text, &ColumnMapping::detect(&text)).unwrap();
        assert_eq!(write_games(&back), text);
    }
}
