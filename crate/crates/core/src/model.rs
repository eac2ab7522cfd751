//! Model grid, linear predictors, likelihood pieces, and the joint log-density
//! h(η) = log f(r | η) + log f(η) with analytic derivatives.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{RankError, Result};
use crate::normal::{self, GaussHermite};
use crate::schedule::{DesignMatrices, FcsMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Link {
    Probit,
    Logit,
}

impl Link {
    pub fn letter(self) -> char {
        match self {
            Link::Probit => 'P',
            Link::Logit => 'L',
        }
    }
}

/// Estimation method. `FixedVariance` holds every variance component at the given value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Method {
    PqlMl,
    PqlReml,
    Laplace,
    FullyExponential,
    Mease,
    FixedVariance(f64),
}

impl Method {
    pub fn is_em(self) -> bool {
        matches!(self, Method::Laplace | Method::FullyExponential)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Max absolute parameter change that ends the outer loop.
    pub param_change: f64,
    /// Relative change in the Laplace log-likelihood that ends EM.
    pub loglik_rel_change: f64,
    pub max_pql_iter: usize,
    pub max_em_iter: usize,
    /// Sup-norm of ∇h accepted at the mode.
    pub mode_grad: f64,
    pub max_mode_iter: usize,
    pub weight_floor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            param_change: 1e-6,
            loglik_rel_change: 1e-8,
            max_pql_iter: 200,
            max_em_iter: 500,
            mode_grad: 1e-10,
            max_mode_iter: 100,
            weight_floor: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub link: Link,
    pub fcs_mode: FcsMode,
    pub method: Method,
    pub tol: Tolerances,
}

impl ModelConfig {
    pub fn new(link: Link, fcs_mode: FcsMode, method: Method) -> Result<Self> {
        let cfg = Self {
            link,
            fcs_mode,
            method,
            tol: Tolerances::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            Method::Mease if self.link != Link::Probit || self.fcs_mode != FcsMode::Consolidated => {
                Err(RankError::InvalidConfig(
                    "the penalized-likelihood (mease) model requires the probit link and fcs mode 0".into(),
                ))
            }
            Method::FixedVariance(v) if !(v > 0.0 && v.is_finite()) => Err(RankError::InvalidConfig(
                format!("fixed variance must be positive, got {v}"),
            )),
            _ => Ok(()),
        }
    }

    /// Grid label such as `FE.P.2`.
    pub fn label(&self) -> String {
        let grid = |m: &str| format!("{m}.{}.{}", self.link.letter(), self.fcs_mode.digit());
        match self.method {
            Method::PqlMl => grid("PQL"),
            Method::PqlReml => grid("PQL") + "-REML",
            Method::Laplace => grid("LA"),
            Method::FullyExponential => grid("FE"),
            Method::Mease => "MEASE".to_string(),
            Method::FixedVariance(v) => format!("{}[s2={v}]", grid("PQL")),
        }
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VarianceComponents {
    Pooled(f64),
    Separate { fbs: f64, fcs: f64 },
    /// Fixed penalty density in place of a normal prior; nothing to estimate.
    Penalty,
}

impl VarianceComponents {
    pub fn values(&self) -> Vec<f64> {
        match *self {
            VarianceComponents::Pooled(v) => vec![v],
            VarianceComponents::Separate { fbs, fcs } => vec![fbs, fcs],
            VarianceComponents::Penalty => Vec::new(),
        }
    }

    pub fn from_values(mode: FcsMode, values: &[f64]) -> Self {
        match (mode, values) {
            (FcsMode::Separate, [a, b]) => VarianceComponents::Separate { fbs: *a, fcs: *b },
            (_, [v, ..]) => VarianceComponents::Pooled(*v),
            (_, []) => VarianceComponents::Penalty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    /// FCS effect; `None` in consolidated mode.
    pub beta: Option<f64>,
    pub variance: VarianceComponents,
}

impl ParameterVector {
    /// Starting values: β = 1, every variance 0.5 (fixed variance used as is).
    pub fn initial(config: &ModelConfig) -> Self {
        let beta = config.fcs_mode.has_fixed_effect().then_some(1.0);
        let v = match config.method {
            Method::FixedVariance(v) => v,
            _ => 0.5,
        };
        let variance = match (config.method, config.fcs_mode) {
            (Method::Mease, _) => VarianceComponents::Penalty,
            (_, FcsMode::Separate) => VarianceComponents::Separate { fbs: v, fcs: v },
            _ => VarianceComponents::Pooled(v),
        };
        Self { beta, variance }
    }

    /// β and the variance values as one flat vector, for change monitoring.
    pub fn flat(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.beta.into_iter().collect();
        out.extend(self.variance.values());
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.variance.values().iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(RankError::InvalidConfig(format!(
                "variance components must be positive: {:?}",
                self.variance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub eta: DVector<f64>,
    pub cov: Option<DMatrix<f64>>,
}

impl LatentState {
    pub fn zeros(n: usize) -> Self {
        Self {
            eta: DVector::zeros(n),
            cov: None,
        }
    }
}

/// Random-effect density entering h(η).
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    /// Independent normals with the given per-team variances.
    Normal(Vec<f64>),
    /// ∝ ∏ Φ(η_j) Φ(-η_j), unnormalized.
    MeasePenalty,
}

impl Prior {
    /// `p` is the number of FBS columns; the remaining columns use the FCS variance.
    pub fn from_params(params: &ParameterVector, p: usize, n_teams: usize) -> Self {
        match params.variance {
            VarianceComponents::Pooled(v) => Prior::Normal(vec![v; n_teams]),
            VarianceComponents::Separate { fbs, fcs } => {
                Prior::Normal((0..n_teams).map(|j| if j < p { fbs } else { fcs }).collect())
            }
            VarianceComponents::Penalty => Prior::MeasePenalty,
        }
    }

    pub fn is_normal(&self) -> bool {
        matches!(self, Prior::Normal(_))
    }
}

/// ν_i = X_i β + Z_i η.
pub fn linear_predictor(design: &DesignMatrices, i: usize, beta: Option<f64>, eta: &DVector<f64>) -> f64 {
    let (h, a) = design.row(i);
    design.x_at(i) * beta.unwrap_or(0.0) + eta[h] - eta[a]
}

pub fn win_probability(link: Link, nu: f64) -> f64 {
    match link {
        Link::Probit => normal::cdf(nu),
        Link::Logit => normal::logistic(nu),
    }
}

/// P(home win) when ν ~ N(mean, var), i.e. with the team effects integrated out.
pub fn marginal_win_probability(link: Link, mean: f64, var: f64) -> f64 {
    match link {
        Link::Probit => normal::cdf(mean / (1.0 + var).sqrt()),
        Link::Logit => GaussHermite::new(40).expect_normal(mean, var, normal::logistic),
    }
}

/// `[ℓ, ℓ', ℓ'', ℓ''', ℓ'''']` of one game's log-likelihood in ν.
pub fn game_derivs(link: Link, nu: f64, home_win: bool) -> [f64; 5] {
    match link {
        Link::Probit => {
            let s = if home_win { 1.0 } else { -1.0 };
            let g = normal::log_cdf_derivs(s * nu);
            [g[0], s * g[1], g[2], s * g[3], g[4]]
        }
        Link::Logit => {
            let p = normal::logistic(nu);
            let q = normal::logistic(-nu);
            let pq = p * q;
            let (ll, d1) = if home_win {
                (-normal::softplus(-nu), q)
            } else {
                (-normal::softplus(nu), -p)
            };
            [ll, d1, -pq, -pq * (q - p), -pq * (1.0 - 6.0 * pq)]
        }
    }
}

/// Σ_i log P(r_i | η).
pub fn conditional_loglik(
    design: &DesignMatrices,
    outcomes: &[bool],
    link: Link,
    beta: Option<f64>,
    eta: &DVector<f64>,
) -> Result<f64> {
    check_dims(design, outcomes, eta)?;
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(RankError::NonFinite("team effects".into()));
    }
    Ok((0..design.n_games())
        .map(|i| game_derivs(link, linear_predictor(design, i, beta, eta), outcomes[i])[0])
        .sum())
}

/// log f(η); normal priors are fully normalized, the penalty is not.
pub fn random_effect_logdensity(prior: &Prior, eta: &DVector<f64>) -> f64 {
    match prior {
        Prior::Normal(var) => eta
            .iter()
            .zip(var)
            .map(|(e, v)| -0.5 * (e * e / v + (2.0 * PI * v).ln()))
            .sum(),
        Prior::MeasePenalty => eta
            .iter()
            .map(|&e| normal::log_cdf(e) + normal::log_cdf(-e))
            .sum(),
    }
}

/// Derivatives 0..=4 of the penalty log Φ(x) + log Φ(-x) at one coordinate.
pub fn penalty_derivs(x: f64) -> [f64; 5] {
    let a = normal::log_cdf_derivs(x);
    let b = normal::log_cdf_derivs(-x);
    [a[0] + b[0], a[1] - b[1], a[2] + b[2], a[3] - b[3], a[4] + b[4]]
}

fn check_dims(design: &DesignMatrices, outcomes: &[bool], eta: &DVector<f64>) -> Result<()> {
    if outcomes.len() != design.n_games() {
        return Err(RankError::Dimension(format!(
            "{} outcomes for {} games",
            outcomes.len(),
            design.n_games()
        )));
    }
    if eta.len() != design.n_teams() {
        return Err(RankError::Dimension(format!(
            "{} team effects for {} design columns",
            eta.len(),
            design.n_teams()
        )));
    }
    Ok(())
}

/// Symmetric matrix with fill only on the diagonal and on team pairs that met.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseHessian {
    pub diag: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
    pub off: Vec<f64>,
}

impl SparseHessian {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.diag.len();
        let mut m = DMatrix::from_diagonal(&DVector::from_column_slice(&self.diag));
        for (&(a, b), &v) in self.pairs.iter().zip(&self.off) {
            m[(a, b)] += v;
            m[(b, a)] += v;
        }
        debug_assert_eq!(m.nrows(), n);
        m
    }

    pub fn negated(&self) -> Self {
        Self {
            diag: self.diag.iter().map(|v| -v).collect(),
            pairs: self.pairs.clone(),
            off: self.off.iter().map(|v| -v).collect(),
        }
    }
}

/// h(η) for a fixed β and prior.
#[derive(Debug, Clone)]
pub struct JointLogDensity<'a> {
    pub design: &'a DesignMatrices,
    pub outcomes: &'a [bool],
    pub link: Link,
    pub beta: Option<f64>,
    pub prior: Prior,
}

impl<'a> JointLogDensity<'a> {
    pub fn new(
        design: &'a DesignMatrices,
        outcomes: &'a [bool],
        link: Link,
        beta: Option<f64>,
        prior: Prior,
    ) -> Result<Self> {
        if outcomes.len() != design.n_games() {
            return Err(RankError::Dimension(format!(
                "{} outcomes for {} games",
                outcomes.len(),
                design.n_games()
            )));
        }
        if let Prior::Normal(v) = &prior {
            if v.len() != design.n_teams() {
                return Err(RankError::Dimension("prior variances vs design columns".into()));
            }
        }
        Ok(Self {
            design,
            outcomes,
            link,
            beta,
            prior,
        })
    }

    pub fn dim(&self) -> usize {
        self.design.n_teams()
    }

    /// Per-game derivative vectors at η.
    pub fn game_derivs(&self, eta: &DVector<f64>) -> Vec<[f64; 5]> {
        (0..self.design.n_games())
            .map(|i| {
                let nu = linear_predictor(self.design, i, self.beta, eta);
                game_derivs(self.link, nu, self.outcomes[i])
            })
            .collect()
    }

    pub fn value(&self, eta: &DVector<f64>) -> f64 {
        let lik: f64 = self.game_derivs(eta).iter().map(|d| d[0]).sum();
        lik + random_effect_logdensity(&self.prior, eta)
    }

    /// (h, ∇h, ∇²h) at η.
    pub fn evaluate(&self, eta: &DVector<f64>) -> (f64, DVector<f64>, SparseHessian) {
        let n = self.dim();
        let derivs = self.game_derivs(eta);
        let mut value = 0.0;
        let mut grad = DVector::zeros(n);
        let mut diag = vec![0.0; n];
        let mut off = vec![0.0; self.design.pairs().len()];
        for (i, d) in derivs.iter().enumerate() {
            let (h, a) = self.design.row(i);
            value += d[0];
            grad[h] += d[1];
            grad[a] -= d[1];
            diag[h] += d[2];
            diag[a] += d[2];
            off[self.design.row_pair(i)] -= d[2];
        }
        value += random_effect_logdensity(&self.prior, eta);
        match &self.prior {
            Prior::Normal(var) => {
                for j in 0..n {
                    grad[j] -= eta[j] / var[j];
                    diag[j] -= 1.0 / var[j];
                }
            }
            Prior::MeasePenalty => {
                for j in 0..n {
                    let p = penalty_derivs(eta[j]);
                    grad[j] += p[1];
                    diag[j] += p[2];
                }
            }
        }
        let hess = SparseHessian {
            diag,
            pairs: self.design.pairs().to_vec(),
            off,
        };
        (value, grad, hess)
    }
}

/// h(η), ∇h, and the sparse ∇²h; rejects non-finite η.
pub fn joint_logdensity_h(
    design: &DesignMatrices,
    outcomes: &[bool],
    link: Link,
    params: &ParameterVector,
    p: usize,
    state: &LatentState,
) -> Result<(f64, DVector<f64>, SparseHessian)> {
    check_dims(design, outcomes, &state.eta)?;
    if state.eta.iter().any(|v| !v.is_finite()) {
        return Err(RankError::NonFinite("team effects".into()));
    }
    let prior = Prior::from_params(params, p, design.n_teams());
    let joint = JointLogDensity::new(design, outcomes, link, params.beta, prior)?;
    Ok(joint.evaluate(&state.eta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cycle() -> (DesignMatrices, Vec<bool>) {
        // A beats B, B beats C, C beats A
        let d = DesignMatrices::new(3, vec![(0, 1), (1, 2), (2, 0)], None).unwrap();
        (d, vec![true, true, true])
    }

    #[test]
    fn linear_predictor_cases() {
        let d = DesignMatrices::new(2, vec![(0, 1)], Some(vec![0.0])).unwrap();
        assert_eq!(linear_predictor(&d, 0, Some(1.0), &DVector::zeros(2)), 0.0);
        let eta = DVector::from_vec(vec![1.0, 0.3]);
        assert_relative_eq!(linear_predictor(&d, 0, Some(1.0), &eta), 0.7, epsilon = 1e-15);
        let d = DesignMatrices::new(2, vec![(0, 1)], Some(vec![1.0])).unwrap();
        let eta = DVector::from_vec(vec![0.4, 0.4]);
        assert_relative_eq!(linear_predictor(&d, 0, Some(2.03), &eta), 2.03, epsilon = 1e-15);
    }

    #[test]
    fn win_probability_cases() {
        assert_eq!(win_probability(Link::Probit, 0.0), 0.5);
        assert_eq!(win_probability(Link::Logit, 0.0), 0.5);
        assert!((win_probability(Link::Probit, 2.03) - 0.979).abs() < 5e-4);
    }

    #[test]
    fn conditional_loglik_cases() {
        let d = DesignMatrices::new(2, vec![(0, 1)], None).unwrap();
        let ll = conditional_loglik(&d, &[true], Link::Probit, None, &DVector::zeros(2)).unwrap();
        assert_relative_eq!(ll, 0.5f64.ln(), epsilon = 1e-15);
        let d2 = DesignMatrices::new(2, vec![(0, 1), (1, 0)], None).unwrap();
        let ll = conditional_loglik(&d2, &[true, false], Link::Logit, None, &DVector::zeros(2)).unwrap();
        assert_relative_eq!(ll, -1.386_294_361_119_890_6, epsilon = 1e-14);
        let dx = DesignMatrices::new(2, vec![(0, 1)], Some(vec![1.0])).unwrap();
        let ll = conditional_loglik(&dx, &[true], Link::Probit, Some(2.03), &DVector::zeros(2)).unwrap();
        // log Φ(2.03); the rounded probability 0.979 gives -0.02123
        assert_relative_eq!(ll, -0.021_405_746_641_130_353, epsilon = 1e-13);
        assert!(conditional_loglik(&d, &[true, false], Link::Probit, None, &DVector::zeros(2)).is_err());
        let bad = DVector::from_vec(vec![f64::NAN, 0.0]);
        assert!(conditional_loglik(&d, &[true], Link::Probit, None, &bad).is_err());
    }

    #[test]
    fn prior_densities() {
        let eta = DVector::from_vec(vec![0.0]);
        assert_relative_eq!(
            random_effect_logdensity(&Prior::MeasePenalty, &eta),
            0.25f64.ln(),
            epsilon = 1e-15
        );
        let e = DVector::from_vec(vec![0.7, -1.3]);
        assert_relative_eq!(
            random_effect_logdensity(&Prior::MeasePenalty, &e),
            random_effect_logdensity(&Prior::MeasePenalty, &(-e.clone())),
            epsilon = 1e-14
        );
        let z = DVector::zeros(4);
        let v = 0.37;
        assert_relative_eq!(
            random_effect_logdensity(&Prior::Normal(vec![v; 4]), &z),
            -2.0 * (2.0 * PI * v).ln(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn cycle_gradient_vanishes_at_zero() {
        let (d, r) = cycle();
        let joint = JointLogDensity::new(&d, &r, Link::Probit, None, Prior::Normal(vec![1.0; 3])).unwrap();
        let (_, g, _) = joint.evaluate(&DVector::zeros(3));
        assert!(g.amax() < 1e-15);
    }

    #[test]
    fn config_constraints() {
        assert!(ModelConfig::new(Link::Logit, FcsMode::Consolidated, Method::Mease).is_err());
        assert!(ModelConfig::new(Link::Probit, FcsMode::Pooled, Method::Mease).is_err());
        assert!(ModelConfig::new(Link::Probit, FcsMode::Consolidated, Method::FixedVariance(0.0)).is_err());
        let cfg = ModelConfig::new(Link::Probit, FcsMode::Separate, Method::FullyExponential).unwrap();
        assert_eq!(cfg.label(), "FE.P.2");
        let cfg = ModelConfig::new(Link::Logit, FcsMode::Consolidated, Method::PqlMl).unwrap();
        assert_eq!(cfg.label(), "PQL.L.0");
    }

    #[test]
    fn logit_derivs_match_finite_differences() {
        for &nu in &[-4.0, -0.5, 0.0, 1.2, 6.0] {
            for &r in &[true, false] {
                let d = game_derivs(Link::Logit, nu, r);
                let h = 1e-5;
                let p = game_derivs(Link::Logit, nu + h, r);
                let m = game_derivs(Link::Logit, nu - h, r);
                for k in 0..4 {
                    let fd = (p[k] - m[k]) / (2.0 * h);
                    assert!((fd - d[k + 1]).abs() < 1e-8, "nu={nu} k={k}");
                }
            }
        }
    }
}
