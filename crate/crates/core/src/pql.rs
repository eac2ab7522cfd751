//! Penalized quasi-likelihood.
//!
//! Each outer iteration linearizes the link around the current ν and fits the
//! weighted linear mixed model t = Xβ + Zη + e, e ~ N(0, W⁻¹), with the scale
//! fixed at 1. Variance components maximize the working ML or REML likelihood
//! over θ = log σ² by safeguarded Newton with analytic derivatives.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::em;
use crate::error::{RankError, Result};
use crate::fit::FitResult;
use crate::linalg;
use crate::model::{
    linear_predictor, JointLogDensity, Link, Method, ModelConfig, ParameterVector, Prior, VarianceComponents,
};
use crate::normal;
use crate::schedule::{DesignMatrices, FcsMode};

const LOG_VAR_MIN: f64 = -23.025_850_929_940_457; // ln 1e-10
const LOG_VAR_MAX: f64 = 13.815_510_557_964_274; // ln 1e6

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMode {
    Ml,
    Reml,
}

#[derive(Debug, Clone)]
pub struct WorkingModel {
    pub t: DVector<f64>,
    pub w: DVector<f64>,
    pub params: ParameterVector,
    pub eta: DVector<f64>,
    /// Games whose weight hit the floor.
    pub floored: usize,
}

/// Working response and weights at the current (β, η).
pub fn working_variates(
    design: &DesignMatrices,
    outcomes: &[bool],
    link: Link,
    params: &ParameterVector,
    eta: &DVector<f64>,
    floor: f64,
) -> Result<WorkingModel> {
    if outcomes.len() != design.n_games() || eta.len() != design.n_teams() {
        return Err(RankError::Dimension("working variates: outcomes or η".into()));
    }
    let n = design.n_games();
    let mut t = DVector::zeros(n);
    let mut w = DVector::zeros(n);
    let mut floored = 0;
    for i in 0..n {
        let nu = linear_predictor(design, i, params.beta, eta);
        let r = outcomes[i];
        let (ti, wi) = match link {
            Link::Probit => {
                let up = normal::inv_mills(nu);
                let down = normal::inv_mills(-nu);
                let ti = if r { nu + 1.0 / down } else { nu - 1.0 / up };
                (ti, up * down)
            }
            Link::Logit => {
                let p = normal::logistic(nu);
                let wi = p * (1.0 - p);
                let ti = nu + (if r { 1.0 } else { 0.0 } - p) / wi.max(floor);
                (ti, wi)
            }
        };
        if !ti.is_finite() {
            return Err(RankError::NonFinite(format!("working response for game {i}")));
        }
        t[i] = ti;
        w[i] = if wi < floor || !wi.is_finite() {
            floored += 1;
            floor
        } else {
            wi
        };
    }
    if floored > 0 {
        warn!("{floored} working weights floored at {floor:e}");
    }
    Ok(WorkingModel {
        t,
        w,
        params: params.clone(),
        eta: eta.clone(),
        floored,
    })
}

/// θ-independent cross products of the working model. Unknowns are ordered [η, β].
struct CrossProducts {
    m: usize,
    has_x: bool,
    /// [Z'WZ, Z'WX; X'WZ, X'WX]
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    twt: f64,
    sum_log_w: f64,
    /// Variance block of each team column.
    block: Vec<usize>,
    n_blocks: usize,
}

impl CrossProducts {
    fn new(wm: &WorkingModel, design: &DesignMatrices, mode: FcsMode) -> Self {
        let m = design.n_teams();
        let has_x = design.x().is_some();
        let k = m + usize::from(has_x);
        let mut gram = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for (i, &(h, a)) in design.rows().iter().enumerate() {
            let w = wm.w[i];
            let wt = w * wm.t[i];
            gram[(h, h)] += w;
            gram[(a, a)] += w;
            gram[(h, a)] -= w;
            gram[(a, h)] -= w;
            rhs[h] += wt;
            rhs[a] -= wt;
            if has_x {
                let x = design.x_at(i);
                gram[(h, m)] += w * x;
                gram[(a, m)] -= w * x;
                gram[(m, h)] += w * x;
                gram[(m, a)] -= w * x;
                gram[(m, m)] += w * x * x;
                rhs[m] += wt * x;
            }
        }
        let separate = mode == FcsMode::Separate && design.fbs_cols() < m;
        let block = (0..m).map(|j| usize::from(separate && j >= design.fbs_cols())).collect();
        Self {
            m,
            has_x,
            gram,
            rhs,
            twt: wm.t.iter().zip(wm.w.iter()).map(|(t, w)| w * t * t).sum(),
            sum_log_w: wm.w.iter().map(|w| w.ln()).sum(),
            block,
            n_blocks: if separate { 2 } else { 1 },
        }
    }

    fn d(&self, theta: &[f64]) -> Vec<f64> {
        self.block.iter().map(|&b| theta[b].exp()).collect()
    }
}

struct WorkingEval {
    value: f64,
    grad: Vec<f64>,
    hess: Vec<Vec<f64>>,
    sol: DVector<f64>,
    c_inv: DMatrix<f64>,
}

/// Working log-likelihood (ML or REML) and its θ-derivatives.
fn working_eval(cp: &CrossProducts, theta: &[f64], vm: VarianceMode) -> Result<WorkingEval> {
    let m = cp.m;
    let d = cp.d(theta);
    let mut big_m = cp.gram.clone();
    for j in 0..m {
        big_m[(j, j)] += 1.0 / d[j];
    }
    let m_chol = linalg::cholesky(big_m.clone(), if cp.has_x { "[eta, beta]" } else { "eta" })?;
    let m_inv = linalg::inverse(&m_chol);
    let sol = m_chol.solve(&cp.rhs);
    let (logdet, c_inv) = if cp.has_x {
        let c_chol = linalg::cholesky(big_m.view((0, 0), (m, m)).into_owned(), "eta")?;
        let c_inv = linalg::inverse(&c_chol);
        let ld = match vm {
            VarianceMode::Ml => linalg::log_det(&c_chol),
            VarianceMode::Reml => linalg::log_det(&m_chol),
        };
        (ld, c_inv)
    } else {
        (linalg::log_det(&m_chol), m_inv.clone())
    };
    // matrix entering the log-determinant derivatives
    let p_mat = match vm {
        VarianceMode::Ml => &c_inv,
        VarianceMode::Reml => &m_inv,
    };
    let quad = cp.twt - sol.dot(&cp.rhs);
    let sum_log_d: f64 = d.iter().map(|v| v.ln()).sum();
    let value = -0.5 * (-cp.sum_log_w + sum_log_d + logdet + quad);

    let nb = cp.n_blocks;
    let mut grad = vec![0.0; nb];
    let mut hess = vec![vec![0.0; nb]; nb];
    let mut count = vec![0.0; nb];
    let mut tr = vec![0.0; nb];
    let mut sq = vec![0.0; nb];
    for j in 0..m {
        let k = cp.block[j];
        count[k] += 1.0;
        tr[k] += p_mat[(j, j)] / d[j];
        sq[k] += sol[j] * sol[j] / d[j];
    }
    for k in 0..nb {
        // ∂logdet = −tr(P E_k), ∂quad = −sol'E_k sol
        grad[k] = -0.5 * (count[k] - tr[k] - sq[k]);
    }
    let mut cross_p = vec![vec![0.0; nb]; nb];
    let mut cross_s = vec![vec![0.0; nb]; nb];
    for i in 0..m {
        let ki = cp.block[i];
        let si = sol[i] / d[i];
        for j in 0..m {
            let kj = cp.block[j];
            let pij = p_mat[(i, j)];
            cross_p[ki][kj] += pij * pij / (d[i] * d[j]);
            cross_s[ki][kj] += si * m_inv[(i, j)] * sol[j] / d[j];
        }
    }
    for k in 0..nb {
        for l in 0..nb {
            let delta = if k == l { 1.0 } else { 0.0 };
            let d2_logdet = -cross_p[k][l] + delta * tr[k];
            let d2_quad = -2.0 * cross_s[k][l] + delta * sq[k];
            hess[k][l] = -0.5 * (d2_logdet + d2_quad);
        }
    }
    Ok(WorkingEval {
        value,
        grad,
        hess,
        sol,
        c_inv,
    })
}

/// Working log-likelihood with its gradient and Hessian in θ = log σ² (one
/// entry per variance block).
pub fn working_loglik(
    working: &WorkingModel,
    design: &DesignMatrices,
    mode: FcsMode,
    theta: &[f64],
    vm: VarianceMode,
) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    let cp = CrossProducts::new(working, design, mode);
    if theta.len() != cp.n_blocks {
        return Err(RankError::Dimension(format!("{} log-variances for {} blocks", theta.len(), cp.n_blocks)));
    }
    let ev = working_eval(&cp, theta, vm)?;
    Ok((ev.value, ev.grad, ev.hess))
}

/// Maximizes the working likelihood over θ by damped Newton, falling back to
/// gradient steps where the Hessian is not negative definite.
fn optimize_theta(cp: &CrossProducts, theta0: &[f64], vm: VarianceMode) -> Result<(Vec<f64>, WorkingEval)> {
    let mut theta: Vec<f64> = theta0.iter().map(|t| t.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).collect();
    let mut ev = working_eval(cp, &theta, vm)?;
    for _ in 0..200 {
        let step = newton_direction(&ev.grad, &ev.hess);
        let max_step = step.iter().fold(0.0f64, |a, s| a.max(s.abs()));
        if max_step < 1e-10 || ev.grad.iter().all(|g| g.abs() < 1e-10) {
            break;
        }
        let scale = if max_step > 2.0 { 2.0 / max_step } else { 1.0 };
        let mut t = scale;
        let mut accepted = false;
        while t > 1e-8 {
            let trial: Vec<f64> = theta
                .iter()
                .zip(&step)
                .map(|(th, s)| (th + t * s).clamp(LOG_VAR_MIN, LOG_VAR_MAX))
                .collect();
            if let Ok(next) = working_eval(cp, &trial, vm) {
                if next.value >= ev.value - 1e-12 * ev.value.abs().max(1.0) {
                    let moved = trial.iter().zip(&theta).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
                    theta = trial;
                    ev = next;
                    accepted = moved > 0.0;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok((theta, ev))
}

fn newton_direction(g: &[f64], h: &[Vec<f64>]) -> Vec<f64> {
    match g.len() {
        1 if h[0][0] < 0.0 => vec![-g[0] / h[0][0]],
        2 => {
            let (a, b, c) = (h[0][0], h[0][1], h[1][1]);
            let det = a * c - b * b;
            if a < 0.0 && det > 0.0 {
                vec![-(c * g[0] - b * g[1]) / det, -(-b * g[0] + a * g[1]) / det]
            } else {
                g.to_vec()
            }
        }
        _ => g.to_vec(),
    }
}

/// One working-LMM solve: updates variances (unless fixed), β and η.
pub fn lmm_solve(
    working: &WorkingModel,
    design: &DesignMatrices,
    config: &ModelConfig,
    vm: VarianceMode,
) -> Result<(ParameterVector, DVector<f64>, DMatrix<f64>)> {
    let cp = CrossProducts::new(working, design, config.fcs_mode);
    let current = working.params.variance.values();
    let theta0: Vec<f64> = (0..cp.n_blocks).map(|k| current.get(k).copied().unwrap_or(0.5).ln()).collect();
    let (theta, ev) = match config.method {
        Method::FixedVariance(v) => {
            let theta = vec![v.ln(); cp.n_blocks];
            let ev = working_eval(&cp, &theta, vm)?;
            (theta, ev)
        }
        _ => optimize_theta(&cp, &theta0, vm)?,
    };
    let values: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
    let variance = VarianceComponents::from_values(config.fcs_mode, &values);
    let m = cp.m;
    let eta = ev.sol.rows(0, m).into_owned();
    let beta = cp.has_x.then(|| ev.sol[m]);
    Ok((ParameterVector { beta, variance }, eta, ev.c_inv))
}

pub fn fit_pql(design: &DesignMatrices, outcomes: &[bool], config: &ModelConfig) -> Result<FitResult> {
    fit_pql_from(
        design,
        outcomes,
        config,
        ParameterVector::initial(config),
        DVector::zeros(design.n_teams()),
    )
}

pub fn fit_pql_from(
    design: &DesignMatrices,
    outcomes: &[bool],
    config: &ModelConfig,
    start: ParameterVector,
    eta_start: DVector<f64>,
) -> Result<FitResult> {
    let vm = match config.method {
        Method::PqlReml => VarianceMode::Reml,
        Method::PqlMl | Method::FixedVariance(_) => VarianceMode::Ml,
        Method::Mease => return fit_mease(design, outcomes, config),
        other => return Err(RankError::InvalidConfig(format!("{other:?} is not a PQL method"))),
    };
    let tol = config.tol;
    let mut params = start;
    if let Method::FixedVariance(_) = config.method {
        params.variance = ParameterVector::initial(config).variance;
    }
    if config.fcs_mode.has_fixed_effect() && params.beta.is_none() {
        params.beta = Some(1.0);
    }
    params.validate()?;
    let mut eta = eta_start;
    let mut warnings = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut change = f64::INFINITY;
    let mut c_inv = DMatrix::zeros(0, 0);
    let mut floored_total = 0;
    while iterations < tol.max_pql_iter {
        iterations += 1;
        let wm = working_variates(design, outcomes, config.link, &params, &eta, tol.weight_floor)?;
        floored_total += wm.floored;
        let (next, next_eta, ci) = lmm_solve(&wm, design, config, vm)?;
        change = params
            .flat()
            .iter()
            .zip(next.flat())
            .map(|(a, b)| (a - b).abs())
            .chain(eta.iter().zip(next_eta.iter()).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        params = next;
        eta = next_eta;
        c_inv = ci;
        if change < tol.param_change {
            converged = true;
            break;
        }
    }
    if floored_total > 0 {
        warnings.push(format!("{floored_total} working weights floored at {:e}", tol.weight_floor));
    }
    if !converged {
        let msg = format!("PQL stopped after {iterations} iterations; last change {change:.3e}");
        warn!("{msg}");
        warnings.push(msg);
    }
    for v in params.variance.values() {
        if v <= LOG_VAR_MIN.exp() * 1.0001 {
            warnings.push("variance estimate at the lower bound 1e-10".into());
        }
    }
    let loglik_approx = laplace_at(design, outcomes, config, &params, &eta).unwrap_or(f64::NAN);
    Ok(FitResult {
        config: *config,
        params,
        eta_hat: eta,
        cond_cov: c_inv,
        loglik_approx,
        iterations,
        converged,
        warnings,
    })
}

/// First-order Laplace marginal log-likelihood at the given parameters.
fn laplace_at(
    design: &DesignMatrices,
    outcomes: &[bool],
    config: &ModelConfig,
    params: &ParameterVector,
    eta: &DVector<f64>,
) -> Result<f64> {
    let prior = Prior::from_params(params, design.fbs_cols(), design.n_teams());
    let joint = JointLogDensity::new(design, outcomes, config.link, params.beta, prior)?;
    Ok(em::find_mode(&joint, eta, &config.tol)?.laplace_loglik)
}

/// Posterior mode under the penalty prior ∏ Φ(η_j)Φ(−η_j), by damped Newton.
pub fn fit_mease(design: &DesignMatrices, outcomes: &[bool], config: &ModelConfig) -> Result<FitResult> {
    if config.link != Link::Probit || config.fcs_mode != FcsMode::Consolidated {
        return Err(RankError::InvalidConfig("the penalty model needs the probit link and FCS mode 0".into()));
    }
    let joint = JointLogDensity::new(design, outcomes, Link::Probit, None, Prior::MeasePenalty)?;
    let mr = em::find_mode(&joint, &DVector::zeros(design.n_teams()), &config.tol)?;
    let cond_cov = linalg::inverse(&mr.chol);
    Ok(FitResult {
        config: *config,
        params: ParameterVector {
            beta: None,
            variance: VarianceComponents::Penalty,
        },
        eta_hat: mr.mode,
        cond_cov,
        loglik_approx: mr.laplace_loglik,
        iterations: mr.iterations,
        converged: true,
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Tolerances;
    use approx::assert_relative_eq;

    #[test]
    fn working_variates_at_zero() {
        let d = DesignMatrices::new(2, vec![(0, 1)], None).unwrap();
        let params = ParameterVector {
            beta: None,
            variance: VarianceComponents::Pooled(1.0),
        };
        let eta = DVector::zeros(2);
        let wm = working_variates(&d, &[true], Link::Probit, &params, &eta, 1e-10).unwrap();
        assert_relative_eq!(wm.t[0], 0.5 / normal::pdf(0.0), epsilon = 1e-14);
        assert_relative_eq!(wm.t[0], 1.2533, epsilon = 1e-4);
        assert_relative_eq!(wm.w[0], 2.0 / std::f64::consts::PI, epsilon = 1e-14);
        let wm = working_variates(&d, &[false], Link::Logit, &params, &eta, 1e-10).unwrap();
        assert_relative_eq!(wm.t[0], -2.0, epsilon = 1e-14);
        assert_relative_eq!(wm.w[0], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn weights_are_floored_not_zero() {
        let d = DesignMatrices::new(2, vec![(0, 1)], None).unwrap();
        let params = ParameterVector {
            beta: None,
            variance: VarianceComponents::Pooled(1.0),
        };
        let eta = DVector::from_vec(vec![30.0, -30.0]);
        let wm = working_variates(&d, &[true], Link::Logit, &params, &eta, 1e-10).unwrap();
        assert_eq!(wm.floored, 1);
        assert_eq!(wm.w[0], 1e-10);
    }

    #[test]
    fn henderson_matches_dense_solve() {
        let d = DesignMatrices::new(2, vec![(0, 1)], None).unwrap();
        let wm = WorkingModel {
            t: DVector::from_vec(vec![1.3]),
            w: DVector::from_vec(vec![0.6]),
            params: ParameterVector {
                beta: None,
                variance: VarianceComponents::Pooled(0.8),
            },
            eta: DVector::zeros(2),
            floored: 0,
        };
        let config = ModelConfig::new(Link::Probit, FcsMode::Consolidated, Method::FixedVariance(0.8)).unwrap();
        let (_, eta, _) = lmm_solve(&wm, &d, &config, VarianceMode::Ml).unwrap();
        // BLUP = D Z' (W⁻¹ + Z D Z')⁻¹ t
        let v = 1.0 / 0.6 + 2.0 * 0.8;
        assert_relative_eq!(eta[0], 0.8 * 1.3 / v, epsilon = 1e-14);
        assert_relative_eq!(eta[1], -0.8 * 1.3 / v, epsilon = 1e-14);
    }

    #[test]
    fn symmetric_cycle_has_equal_ratings() {
        let d = DesignMatrices::new(3, vec![(0, 1), (1, 2), (2, 0)], None).unwrap();
        let r = [true, true, true];
        let config = ModelConfig::new(Link::Probit, FcsMode::Consolidated, Method::PqlMl).unwrap();
        let fit = fit_pql(&d, &r, &config).unwrap();
        assert!(fit.eta_hat.amax() < 1e-12);
    }

    #[test]
    fn mease_without_games_sits_at_zero() {
        let d = DesignMatrices::new(1, vec![], None).unwrap();
        let config = ModelConfig {
            tol: Tolerances::default(),
            ..ModelConfig::new(Link::Probit, FcsMode::Consolidated, Method::Mease).unwrap()
        };
        let fit = fit_mease(&d, &[], &config).unwrap();
        assert_eq!(fit.eta_hat[0], 0.0);
    }
}
