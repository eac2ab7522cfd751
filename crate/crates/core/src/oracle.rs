//! Tensor Gauss-Hermite integration over small designs, a season simulator,
//! and a replicated bias study.

use std::f64::consts::PI;

use chrono::{Days, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{RankError, Result};
use crate::fit::{fit, FitResult};
use crate::model::{game_derivs, linear_predictor, win_probability, Link, ModelConfig, ParameterVector, Prior};
use crate::normal::GaussHermite;
use crate::schedule::{DesignMatrices, Division, GameRecord, Roster};

pub const MAX_ORACLE_DIMS: usize = 5;
pub const DEFAULT_NODES: usize = 40;

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub marginal_loglik: f64,
    pub posterior_mean: DVector<f64>,
    pub posterior_cov: DMatrix<f64>,
    pub nodes_per_dim: usize,
}

/// log ∫ f(r | η) N(η; 0, D) dη and the posterior moments of η.
pub fn oracle_integrate(
    design: &DesignMatrices,
    outcomes: &[bool],
    link: Link,
    params: &ParameterVector,
    nodes_per_dim: usize,
) -> Result<OracleResult> {
    let m = design.n_teams();
    if m > MAX_ORACLE_DIMS {
        return Err(RankError::OracleDimension {
            dims: m,
            max: MAX_ORACLE_DIMS,
        });
    }
    if outcomes.len() != design.n_games() {
        return Err(RankError::Dimension("oracle outcomes vs games".into()));
    }
    let var = match Prior::from_params(params, design.fbs_cols(), m) {
        Prior::Normal(v) => v,
        Prior::MeasePenalty => {
            return Err(RankError::InvalidConfig("quadrature oracle needs a normal prior".into()));
        }
    };
    let gh = GaussHermite::new(nodes_per_dim);
    let log_w: Vec<f64> = gh.weights.iter().map(|w| w.ln()).collect();
    let scale: Vec<f64> = var.iter().map(|v| (2.0 * v).sqrt()).collect();
    let total = nodes_per_dim.pow(m as u32);

    let point = |mut idx: usize, eta: &mut DVector<f64>| -> f64 {
        let mut lw = 0.0;
        for j in 0..m {
            let k = idx % nodes_per_dim;
            idx /= nodes_per_dim;
            eta[j] = scale[j] * gh.nodes[k];
            lw += log_w[k];
        }
        let lik: f64 = (0..design.n_games())
            .map(|i| game_derivs(link, linear_predictor(design, i, params.beta, eta), outcomes[i])[0])
            .sum();
        lw + lik
    };

    let mut eta = DVector::zeros(m);
    let mut max_log = f64::NEG_INFINITY;
    for idx in 0..total {
        max_log = max_log.max(point(idx, &mut eta));
    }
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(m);
    let mut s2 = DMatrix::zeros(m, m);
    for idx in 0..total {
        let w = (point(idx, &mut eta) - max_log).exp();
        s0 += w;
        s1.axpy(w, &eta, 1.0);
        s2.ger(w, &eta, &eta, 1.0);
    }
    let mean = &s1 / s0;
    let mut cov = &s2 / s0 - &mean * mean.transpose();
    crate::linalg::symmetrize(&mut cov);
    Ok(OracleResult {
        marginal_loglik: max_log + s0.ln() - 0.5 * m as f64 * PI.ln(),
        posterior_mean: mean,
        posterior_cov: cov,
        nodes_per_dim,
    })
}

/// Team `i` hosts teams `i+1..=i+k` (mod n), so every team plays 2k games.
pub fn circulant_schedule(n_teams: usize, k: usize) -> Result<DesignMatrices> {
    if n_teams < 2 || 2 * k >= n_teams {
        return Err(RankError::InvalidConfig(format!(
            "circulant schedule needs 2k < n, got n={n_teams}, k={k}"
        )));
    }
    let rows = (0..n_teams)
        .flat_map(|i| (1..=k).map(move |d| (i, (i + d) % n_teams)))
        .collect();
    DesignMatrices::new(n_teams, rows, None)
}

#[derive(Debug, Clone)]
pub struct SyntheticSeason {
    pub design: DesignMatrices,
    pub true_params: ParameterVector,
    pub true_eta: DVector<f64>,
    pub outcomes: Vec<bool>,
    pub seed: u64,
}

/// Draws η from the prior once, then every outcome. `stream` separates replications.
pub fn simulate_season(
    design: &DesignMatrices,
    true_params: &ParameterVector,
    link: Link,
    seed: u64,
    stream: u64,
) -> SyntheticSeason {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let m = design.n_teams();
    let sd: Vec<f64> = match Prior::from_params(true_params, design.fbs_cols(), m) {
        Prior::Normal(v) => v.iter().map(|v| v.max(0.0).sqrt()).collect(),
        Prior::MeasePenalty => vec![0.0; m],
    };
    let true_eta = DVector::from_iterator(
        m,
        sd.iter().map(|s| {
            let z: f64 = rng.sample(StandardNormal);
            s * z
        }),
    );
    let outcomes = (0..design.n_games())
        .map(|i| {
            let p = win_probability(link, linear_predictor(design, i, true_params.beta, &true_eta));
            rng.random::<f64>() < p
        })
        .collect();
    SyntheticSeason {
        design: design.clone(),
        true_params: true_params.clone(),
        true_eta,
        outcomes,
        seed,
    }
}

/// Shape of a two-division synthetic league.
#[derive(Debug, Clone, PartialEq)]
pub struct LeagueShape {
    pub fbs_teams: usize,
    pub fcs_teams: usize,
    pub conference_size: usize,
    /// Each team hosts the next `k` conference mates (circularly).
    pub conference_k: usize,
    pub fcs_visits: usize,
    pub season_start: NaiveDate,
}

impl Default for LeagueShape {
    fn default() -> Self {
        Self {
            fbs_teams: 120,
            fcs_teams: 118,
            conference_size: 12,
            conference_k: 4,
            fcs_visits: 86,
            season_start: NaiveDate::from_ymd_opt(2030, 8, 31).expect("valid date"),
        }
    }
}

/// A season of games for `shape` with outcomes drawn from the model.
///
/// FBS teams play their conference, then two cross-conference opponents at
/// each of two conference offsets. FCS teams play their conference and the
/// FCS team twelve places on. The first `fcs_visits` FCS teams visit an FBS host.
pub fn synthetic_league(
    shape: &LeagueShape,
    true_params: &ParameterVector,
    link: Link,
    seed: u64,
) -> Result<(Vec<GameRecord>, Roster, SyntheticSeason)> {
    let p = shape.fbs_teams;
    let q = shape.fcs_teams;
    let c = shape.conference_size;
    if p < 2 || c < 2 * shape.conference_k + 1 || shape.fcs_visits > p.min(q) {
        return Err(RankError::InvalidConfig(format!("league shape {shape:?}")));
    }
    let conf_pairs = |offset: usize, len: usize| -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < len {
            let size = c.min(len - start);
            let k = shape.conference_k.min((size - 1) / 2);
            for i in 0..size {
                for d in 1..=k {
                    out.push((offset + start + i, offset + start + (i + d) % size));
                }
            }
            start += size;
        }
        out
    };
    let mut rows = conf_pairs(0, p);
    let n_conf = p.div_ceil(c);
    if n_conf >= 5 {
        for i in 0..p {
            let (conf, slot) = (i / c, i % c);
            for shift in 1..=2 {
                let j = ((conf + shift) % n_conf) * c + slot;
                if j < p && (i + j) % 2 == shift % 2 {
                    rows.push((i, j));
                } else if j < p {
                    rows.push((j, i));
                }
            }
        }
    }
    for v in 0..shape.fcs_visits {
        rows.push((v, p + v));
    }
    rows.extend(conf_pairs(p, q));
    if q > 2 * c {
        for i in 0..q {
            rows.push((p + i, p + (i + c) % q));
        }
    }
    let x = rows.iter().map(|&(h, a)| f64::from(h < p && a >= p)).collect();
    let design = DesignMatrices::new(p + q, rows, Some(x))?.with_fbs_cols(p);
    let season = simulate_season(&design, true_params, link, seed, 0);

    let fbs_name = |i: usize| format!("FBS {:02}-{:02}", i / c + 1, i % c + 1);
    let fcs_name = |i: usize| format!("FCS {:02}-{:02}", i / c + 1, i % c + 1);
    let names: Vec<String> = (0..p).map(fbs_name).chain((0..q).map(fcs_name)).collect();
    let (records, roster) = season_records(&design, &names, &season.outcomes, shape.season_start)?;
    Ok((records, roster, season))
}

/// Game records and roster for a design whose columns are named by `names`.
/// Columns below `design.fbs_cols()` are FBS; games are spread over 14 weekly dates.
pub fn season_records(
    design: &DesignMatrices,
    names: &[String],
    outcomes: &[bool],
    start: NaiveDate,
) -> Result<(Vec<GameRecord>, Roster)> {
    if names.len() != design.n_teams() || outcomes.len() != design.n_games() {
        return Err(RankError::Dimension("names or outcomes vs design".into()));
    }
    let p = design.fbs_cols();
    let roster: Roster = names
        .iter()
        .enumerate()
        .map(|(j, n)| (n.clone(), if j < p { Division::Fbs } else { Division::Fcs }))
        .collect();
    let records = design
        .rows()
        .iter()
        .enumerate()
        .map(|(g, &(h, a))| GameRecord {
            date: start + Days::new(7 * (g % 14) as u64),
            home: names[h].clone(),
            away: names[a].clone(),
            home_win: outcomes[g],
            fcs_visit: h < p && a >= p,
            neutral_site: false,
        })
        .collect();
    Ok((records, roster))
}

#[derive(Debug, Clone)]
pub struct BiasRow {
    pub method: String,
    pub parameter: String,
    pub truth: f64,
    pub mean: f64,
    pub sd: f64,
    pub fits: usize,
    pub failures: usize,
    pub mean_rank_displacement: f64,
}

#[derive(Debug, Clone)]
pub struct BiasStudy {
    pub replications: usize,
    pub seed: u64,
    pub rows: Vec<BiasRow>,
}

fn param_names(params: &ParameterVector) -> Vec<&'static str> {
    let mut names = Vec::new();
    if params.beta.is_some() {
        names.push("beta");
    }
    names.extend(match params.variance.values().len() {
        1 => vec!["sigma2"],
        2 => vec!["sigma2_fbs", "sigma2_fcs"],
        _ => vec![],
    });
    names
}

/// Mean |rank(estimate) − rank(truth)| over teams; ties broken by index.
pub fn mean_rank_displacement(estimate: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    let ranks = |v: &DVector<f64>| {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        let mut rank = vec![0usize; v.len()];
        for (r, &j) in order.iter().enumerate() {
            rank[j] = r;
        }
        rank
    };
    let (a, b) = (ranks(estimate), ranks(truth));
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(&b).map(|(x, y)| x.abs_diff(*y) as f64).sum::<f64>() / a.len() as f64
}

/// Simulates `replications` seasons on `design` and fits each with every method.
pub fn bias_study(
    design: &DesignMatrices,
    true_params: &ParameterVector,
    link: Link,
    methods: &[ModelConfig],
    replications: usize,
    seed: u64,
) -> Result<BiasStudy> {
    if replications == 0 {
        return Err(RankError::InvalidConfig("bias study needs at least one replication".into()));
    }
    let per_rep: Vec<(SyntheticSeason, Vec<Result<FitResult>>)> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let season = simulate_season(design, true_params, link, seed, rep as u64);
            let fits = methods
                .iter()
                .map(|cfg| {
                    let f = fit(design, &season.outcomes, cfg)?;
                    if f.converged {
                        Ok(f)
                    } else {
                        Err(RankError::InvalidConfig(format!("{} did not converge", cfg.label())))
                    }
                })
                .collect();
            (season, fits)
        })
        .collect();

    let mut rows = Vec::new();
    for (k, cfg) in methods.iter().enumerate() {
        let ok: Vec<(&SyntheticSeason, &FitResult)> = per_rep
            .iter()
            .filter_map(|(s, fits)| fits[k].as_ref().ok().map(|f| (s, f)))
            .collect();
        let failures = replications - ok.len();
        let disp = if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|(s, f)| mean_rank_displacement(&f.eta_hat, &s.true_eta)).sum::<f64>() / ok.len() as f64
        };
        let template = ParameterVector::initial(cfg);
        let truth = true_params.flat();
        for (pi, name) in param_names(&template).into_iter().enumerate() {
            let vals: Vec<f64> = ok.iter().map(|(_, f)| f.params.flat()[pi]).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            rows.push(BiasRow {
                method: cfg.label(),
                parameter: name.to_string(),
                truth: truth.get(pi).copied().unwrap_or(f64::NAN),
                mean,
                sd,
                fits: ok.len(),
                failures,
                mean_rank_displacement: disp,
            });
        }
    }
    Ok(BiasStudy {
        replications,
        seed,
        rows,
    })
}

impl BiasStudy {
    pub fn mean_of(&self, method: &str, parameter: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.parameter == parameter)
            .map(|r| r.mean)
    }

    /// Comma-separated summary with a header line.
    pub fn to_delimited(&self) -> String {
        let mut out = String::from("method,parameter,truth,mean,sd,bias,fits,failures,mean_rank_displacement\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{:.4},{},{},{:.3}\n",
                r.method,
                r.parameter,
                r.truth,
                r.mean,
                r.sd,
                r.mean - r.truth,
                r.fits,
                r.failures,
                r.mean_rank_displacement
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Method, VarianceComponents};
    use crate::normal;
    use crate::schedule::FcsMode;
    use approx::assert_relative_eq;

    fn pooled(beta: Option<f64>, v: f64) -> ParameterVector {
        ParameterVector {
            beta,
            variance: VarianceComponents::Pooled(v),
        }
    }

    #[test]
    fn zero_games_returns_the_prior() {
        let d = DesignMatrices::new(2, vec![], None).unwrap();
        let o = oracle_integrate(&d, &[], Link::Probit, &pooled(None, 1.7), 20).unwrap();
        assert!(o.marginal_loglik.abs() < 1e-13);
        assert!(o.posterior_mean.amax() < 1e-13);
        assert_relative_eq!(o.posterior_cov[(0, 0)], 1.7, epsilon = 1e-12);
        assert!(o.posterior_cov[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn single_game_closed_form() {
        let d = DesignMatrices::new(2, vec![(0, 1)], Some(vec![1.0])).unwrap();
        let o = oracle_integrate(&d, &[true], Link::Probit, &pooled(Some(2.03), 1.0), 40).unwrap();
        let want = normal::cdf(2.03 / 3f64.sqrt());
        assert_relative_eq!(o.marginal_loglik.exp(), want, epsilon = 1e-8);
        assert_relative_eq!(want, 0.8794, epsilon = 1e-4);
    }

    #[test]
    fn too_many_dimensions_refused() {
        let d = DesignMatrices::new(6, vec![(0, 1)], None).unwrap();
        let err = oracle_integrate(&d, &[true], Link::Probit, &pooled(None, 1.0), 5);
        assert!(matches!(err, Err(RankError::OracleDimension { dims: 6, max: 5 })));
    }

    #[test]
    fn simulation_is_reproducible() {
        let d = circulant_schedule(10, 2).unwrap();
        let tp = pooled(None, 0.8);
        let a = simulate_season(&d, &tp, Link::Probit, 7, 0);
        let b = simulate_season(&d, &tp, Link::Probit, 7, 0);
        let c = simulate_season(&d, &tp, Link::Probit, 7, 1);
        assert_eq!(a.outcomes, b.outcomes);
        assert_eq!(a.true_eta, b.true_eta);
        assert_ne!(a.true_eta, c.true_eta);
    }

    #[test]
    fn zero_variance_fcs_visits_follow_beta() {
        let rows = vec![(0, 1); 20_000];
        let d = DesignMatrices::new(2, rows, Some(vec![1.0; 20_000])).unwrap();
        let s = simulate_season(&d, &pooled(Some(2.03), 0.0), Link::Probit, 3, 0);
        let rate = s.outcomes.iter().filter(|&&r| r).count() as f64 / 20_000.0;
        assert!((rate - 0.9788).abs() < 0.005, "rate {rate}");
    }

    #[test]
    fn league_shape_matches_counts() {
        let tp = pooled(Some(2.03), 0.8);
        let (records, roster, season) = synthetic_league(&LeagueShape::default(), &tp, Link::Probit, 11).unwrap();
        assert_eq!(roster.len(), 238);
        assert_eq!(records.len(), season.design.n_games());
        assert_eq!(records.iter().filter(|r| r.fcs_visit).count(), 86);
        assert!(records.len() > 1300 && records.len() < 1500, "{}", records.len());
    }

    #[test]
    fn one_replication_study_is_reproducible() {
        let d = circulant_schedule(12, 3).unwrap();
        let tp = pooled(None, 0.8);
        let cfg = ModelConfig::new(Link::Probit, FcsMode::Consolidated, Method::PqlMl).unwrap();
        let a = bias_study(&d, &tp, Link::Probit, &[cfg], 1, 5).unwrap().to_delimited();
        let b = bias_study(&d, &tp, Link::Probit, &[cfg], 1, 5).unwrap().to_delimited();
        assert_eq!(a, b);
        assert!(a.starts_with("method,parameter"));
    }
}
