//! EM fitting with a Laplace E-step.
//!
//! The E-step locates the mode η* of h by damped Newton and approximates the
//! conditional distribution of η by N(η*, (−H)⁻¹). The fully exponential
//! variant differentiates the log of the Laplace approximation to
//! ∫ exp(h(η) + s η_j) dη in s, which shifts the mean by a third-derivative
//! term and the variance diagonal by third- and fourth-derivative terms.

use std::f64::consts::PI;
use std::sync::OnceLock;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{RankError, Result};
use crate::fit::FitResult;
use crate::linalg::{self, Chol};
use crate::model::{
    game_derivs, JointLogDensity, Method, ModelConfig, ParameterVector, Prior, SparseHessian, Tolerances,
    VarianceComponents,
};
use crate::normal::GaussHermite;
use crate::schedule::{DesignMatrices, FcsMode};

fn gh30() -> &'static GaussHermite {
    static GH: OnceLock<GaussHermite> = OnceLock::new();
    GH.get_or_init(|| GaussHermite::new(30))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EStepOrder {
    FirstOrder,
    FullyExponential,
}

#[derive(Debug, Clone)]
pub struct ModeResult {
    pub mode: DVector<f64>,
    pub h: f64,
    pub grad_norm: f64,
    pub neg_hessian: SparseHessian,
    pub chol: Chol,
    /// h(η*) + (m/2) log 2π − ½ log det(−H).
    pub laplace_loglik: f64,
    pub iterations: usize,
}

/// Damped Newton on h from `start`.
pub fn find_mode(joint: &JointLogDensity, start: &DVector<f64>, tol: &Tolerances) -> Result<ModeResult> {
    let m = joint.dim();
    if start.len() != m {
        return Err(RankError::Dimension(format!("start has {} entries, design {}", start.len(), m)));
    }
    let mut eta = start.clone();
    let mut grad_norm = f64::INFINITY;
    for iter in 0..=tol.max_mode_iter {
        let (h, grad, hess) = joint.evaluate(&eta);
        if !h.is_finite() {
            return Err(RankError::NonFinite("joint log-density".into()));
        }
        grad_norm = grad.amax();
        let neg = hess.negated();
        let chol = linalg::cholesky(neg.to_dense(), "team-effect Hessian")?;
        let step = chol.solve(&grad);
        let stalled = step.amax() <= 1e-14 * (1.0 + eta.amax());
        if grad_norm < tol.mode_grad || stalled {
            let laplace_loglik = h + 0.5 * m as f64 * (2.0 * PI).ln() - 0.5 * linalg::log_det(&chol);
            return Ok(ModeResult {
                mode: eta,
                h,
                grad_norm,
                neg_hessian: neg,
                chol,
                laplace_loglik,
                iterations: iter,
            });
        }
        let slack = 1e-12 * h.abs().max(1.0);
        let mut t = 1.0;
        loop {
            let trial = &eta + &step * t;
            let ht = joint.value(&trial);
            if ht.is_finite() && ht >= h - slack {
                eta = trial;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                eta = trial;
                break;
            }
        }
    }
    Err(RankError::ModeNotFound {
        iterations: tol.max_mode_iter,
        grad_norm,
    })
}

#[derive(Debug, Clone)]
pub struct EStepResult {
    pub eta_tilde: DVector<f64>,
    pub v_tilde: DMatrix<f64>,
    pub mode: DVector<f64>,
    pub neg_hessian_at_mode: SparseHessian,
    pub laplace_loglik: f64,
    pub mode_iterations: usize,
    pub warnings: Vec<String>,
}

/// Laplace E-step for the current β and prior held in `joint`.
pub fn estep(joint: &JointLogDensity, start: &DVector<f64>, tol: &Tolerances, order: EStepOrder) -> Result<EStepResult> {
    let mr = find_mode(joint, start, tol)?;
    let sigma = linalg::inverse(&mr.chol);
    let mut warnings = Vec::new();
    let (eta_tilde, v_tilde) = match order {
        EStepOrder::FirstOrder => (mr.mode.clone(), sigma),
        EStepOrder::FullyExponential => {
            let corr = fe_corrections(joint, &mr.mode, &sigma);
            let eta = &mr.mode + &corr.mean;
            let v = corrected_covariance(&sigma, &corr.var_diag, &mut warnings);
            (eta, v)
        }
    };
    Ok(EStepResult {
        eta_tilde,
        v_tilde,
        mode: mr.mode,
        neg_hessian_at_mode: mr.neg_hessian,
        laplace_loglik: mr.laplace_loglik,
        mode_iterations: mr.iterations,
        warnings,
    })
}

/// Additive fully exponential corrections at the mode.
#[derive(Debug, Clone)]
pub struct FeCorrections {
    pub mean: DVector<f64>,
    pub var_diag: DVector<f64>,
}

/// Corrections given the mode and Σ = (−H)⁻¹. Only the likelihood carries
/// third and fourth derivatives; the normal prior is quadratic.
pub fn fe_corrections(joint: &JointLogDensity, mode: &DVector<f64>, sigma: &DMatrix<f64>) -> FeCorrections {
    let design = joint.design;
    let m = joint.dim();
    let n = design.n_games();
    let rows = design.rows();
    let d = joint.game_derivs(mode);
    let l3: Vec<f64> = d.iter().map(|g| g[3]).collect();
    let l4: Vec<f64> = d.iter().map(|g| g[4]).collect();

    let zsz = |i: usize, k: usize| {
        let (hi, ai) = rows[i];
        let (hk, ak) = rows[k];
        sigma[(hi, hk)] - sigma[(hi, ak)] - sigma[(ai, hk)] + sigma[(ai, ak)]
    };
    let s: Vec<f64> = (0..n).map(|i| zsz(i, i)).collect();

    let mut u = DVector::zeros(m);
    for (i, &(h, a)) in rows.iter().enumerate() {
        u[h] += l3[i] * s[i];
        u[a] -= l3[i] * s[i];
    }
    let w = sigma * &u;
    let mean = &w * 0.5;

    // N = Z' L3 (G∘G) L3 Z, built through Y = (G∘G) L3 Z.
    let mut y = DMatrix::<f64>::zeros(n, m);
    for i in 0..n {
        for k in 0..n {
            let g = zsz(i, k);
            let v = g * g * l3[k];
            let (hk, ak) = rows[k];
            y[(i, hk)] += v;
            y[(i, ak)] -= v;
        }
    }
    let mut big_n = DMatrix::<f64>::zeros(m, m);
    for (i, &(h, a)) in rows.iter().enumerate() {
        for c in 0..m {
            let v = l3[i] * y[(i, c)];
            big_n[(h, c)] += v;
            big_n[(a, c)] -= v;
        }
    }
    let sn = sigma * &big_n;

    let mut var_diag = DVector::zeros(m);
    for j in 0..m {
        let quad: f64 = (0..m).map(|b| sn[(j, b)] * sigma[(b, j)]).sum();
        let mut term3 = 0.0;
        for (i, &(h, a)) in rows.iter().enumerate() {
            let b = sigma[(h, j)] - sigma[(a, j)];
            term3 += b * b * (l4[i] * s[i] + l3[i] * (w[h] - w[a]));
        }
        var_diag[j] = 0.5 * (quad + term3);
    }
    FeCorrections { mean, var_diag }
}

/// Σ with its diagonal shifted by `corr`; overshooting corrections are clamped,
/// and if the result is still indefinite the first-order Σ is kept.
fn corrected_covariance(sigma: &DMatrix<f64>, corr: &DVector<f64>, warnings: &mut Vec<String>) -> DMatrix<f64> {
    let apply = |clamp: bool| {
        let mut v = sigma.clone();
        for j in 0..v.nrows() {
            let c = if clamp { corr[j].max(-0.5 * sigma[(j, j)]) } else { corr[j] };
            v[(j, j)] += c;
        }
        v
    };
    let v = apply(false);
    if linalg::cholesky(v.clone(), "corrected covariance").is_ok() {
        return v;
    }
    let v = apply(true);
    if linalg::cholesky(v.clone(), "corrected covariance").is_ok() {
        let msg = "fully exponential variance correction clamped to keep the covariance positive definite";
        warn!("{msg}");
        warnings.push(msg.into());
        return v;
    }
    let msg = "fully exponential covariance indefinite; first-order covariance used for this iteration";
    warn!("{msg}");
    warnings.push(msg.into());
    sigma.clone()
}

/// Per-game mean and variance of ν under η ~ N(η̃, ṽ).
fn nu_moments(design: &DesignMatrices, beta: f64, eta: &DVector<f64>, v: &DMatrix<f64>, i: usize) -> (f64, f64) {
    let (h, a) = design.row(i);
    let mean = design.x_at(i) * beta + eta[h] - eta[a];
    let var = v[(h, h)] + v[(a, a)] - 2.0 * v[(h, a)];
    (mean, var.max(0.0))
}

/// Expected score in β under the Gaussian approximation to f(η | r).
pub fn expected_score(
    design: &DesignMatrices,
    outcomes: &[bool],
    link: crate::model::Link,
    beta: f64,
    eta: &DVector<f64>,
    v: &DMatrix<f64>,
) -> f64 {
    let gh = gh30();
    (0..design.n_games())
        .filter(|&i| design.x_at(i) != 0.0)
        .map(|i| {
            let (mean, var) = nu_moments(design, beta, eta, v, i);
            let r = outcomes[i];
            design.x_at(i) * gh.expect_normal(mean, var, |nu| game_derivs(link, nu, r)[1])
        })
        .sum()
}

/// Expected conditional log-likelihood Q(β) under the same approximation.
pub fn expected_loglik(
    design: &DesignMatrices,
    outcomes: &[bool],
    link: crate::model::Link,
    beta: f64,
    eta: &DVector<f64>,
    v: &DMatrix<f64>,
) -> f64 {
    let gh = gh30();
    (0..design.n_games())
        .map(|i| {
            let (mean, var) = nu_moments(design, beta, eta, v, i);
            let r = outcomes[i];
            gh.expect_normal(mean, var, |nu| game_derivs(link, nu, r)[0])
        })
        .sum()
}

const BETA_LIMIT: f64 = 60.0;

/// Root of the expected score by safeguarded Newton with a central-difference slope.
pub fn mstep_beta(
    design: &DesignMatrices,
    outcomes: &[bool],
    link: crate::model::Link,
    eta: &DVector<f64>,
    v: &DMatrix<f64>,
    beta_current: f64,
) -> Result<f64> {
    let score = |b: f64| expected_score(design, outcomes, link, b, eta, v);
    if design.x().is_none_or(|x| x.iter().all(|&xi| xi == 0.0)) {
        return Err(RankError::Separation("no FCS-visit games in the design".into()));
    }
    let s0 = score(beta_current);
    if s0 == 0.0 {
        return Ok(beta_current);
    }
    // Q is concave, so S decreases in β: expand toward the sign change.
    let dir = s0.signum();
    let (mut lo, mut hi) = (beta_current, beta_current);
    let mut step = 1.0;
    let mut found = false;
    while (beta_current + dir * step).abs() <= BETA_LIMIT || step <= 1.0 {
        let b = beta_current + dir * step;
        if score(b).signum() != dir {
            if dir > 0.0 {
                hi = b;
            } else {
                lo = b;
            }
            found = true;
            break;
        }
        if dir > 0.0 {
            lo = b;
        } else {
            hi = b;
        }
        step *= 2.0;
    }
    if !found {
        return Err(RankError::Separation(format!(
            "expected score keeps sign {} out to |β| = {BETA_LIMIT}",
            if dir > 0.0 { "+" } else { "-" }
        )));
    }
    let mut b = beta_current.clamp(lo, hi);
    for _ in 0..100 {
        let s = score(b);
        if s.abs() < 1e-12 {
            return Ok(b);
        }
        if s > 0.0 {
            lo = b;
        } else {
            hi = b;
        }
        let delta = 1e-5;
        let slope = (score(b + delta) - score(b - delta)) / (2.0 * delta);
        let mut next = if slope < 0.0 { b - s / slope } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - b).abs() < 1e-12 || hi - lo < 1e-12 {
            return Ok(next);
        }
        b = next;
    }
    Ok(b)
}

/// σ̂² = mean of ṽ_jj + η̃_j², blockwise in separate mode.
pub fn mstep_variance(eta: &DVector<f64>, v: &DMatrix<f64>, fbs_cols: usize, mode: FcsMode) -> VarianceComponents {
    let second = |range: std::ops::Range<usize>| {
        let len = range.len().max(1) as f64;
        range.map(|j| v[(j, j)] + eta[j] * eta[j]).sum::<f64>() / len
    };
    let m = eta.len();
    match mode {
        FcsMode::Separate if fbs_cols < m => VarianceComponents::Separate {
            fbs: second(0..fbs_cols),
            fcs: second(fbs_cols..m),
        },
        FcsMode::Separate => {
            let s = second(0..m);
            VarianceComponents::Separate { fbs: s, fcs: s }
        }
        _ => VarianceComponents::Pooled(second(0..m)),
    }
}

pub fn fit_em(design: &DesignMatrices, outcomes: &[bool], config: &ModelConfig) -> Result<FitResult> {
    fit_em_from(
        design,
        outcomes,
        config,
        ParameterVector::initial(config),
        DVector::zeros(design.n_teams()),
    )
}

pub fn fit_em_from(
    design: &DesignMatrices,
    outcomes: &[bool],
    config: &ModelConfig,
    start: ParameterVector,
    eta_start: DVector<f64>,
) -> Result<FitResult> {
    let order = match config.method {
        Method::Laplace => EStepOrder::FirstOrder,
        Method::FullyExponential => EStepOrder::FullyExponential,
        other => return Err(RankError::InvalidConfig(format!("{other:?} is not an EM method"))),
    };
    let tol = config.tol;
    let m = design.n_teams();
    let p = design.fbs_cols();
    let mut params = start;
    params.validate()?;
    if config.fcs_mode.has_fixed_effect() && params.beta.is_none() {
        params.beta = Some(1.0);
    }
    let mut warnings = Vec::new();
    let mut eta = eta_start;
    let mut prev_ll: Option<f64> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_change = f64::INFINITY;

    while iterations < tol.max_em_iter {
        iterations += 1;
        let prior = Prior::from_params(&params, p, m);
        let joint = JointLogDensity::new(design, outcomes, config.link, params.beta, prior)?;
        let es = estep(&joint, &eta, &tol, order)?;
        warnings.extend(es.warnings.iter().cloned());
        let beta = match params.beta {
            Some(b) => Some(mstep_beta(design, outcomes, config.link, &es.eta_tilde, &es.v_tilde, b)?),
            None => None,
        };
        let variance = mstep_variance(&es.eta_tilde, &es.v_tilde, p, config.fcs_mode);
        let next = ParameterVector { beta, variance };
        next.validate()?;
        last_change = params
            .flat()
            .iter()
            .zip(next.flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let rel = prev_ll.map(|l| ((es.laplace_loglik - l) / l.abs().max(1e-300)).abs());
        prev_ll = Some(es.laplace_loglik);
        params = next;
        eta = es.mode;
        if last_change < tol.param_change || rel.is_some_and(|r| r < tol.loglik_rel_change) {
            converged = true;
            break;
        }
    }
    if !converged {
        let msg = format!("EM stopped after {iterations} iterations; last parameter change {last_change:.3e}");
        warn!("{msg}");
        warnings.push(msg);
    }

    let prior = Prior::from_params(&params, p, m);
    let joint = JointLogDensity::new(design, outcomes, config.link, params.beta, prior)?;
    let es = estep(&joint, &eta, &tol, order)?;
    warnings.extend(es.warnings);
    warnings.dedup();
    Ok(FitResult {
        config: *config,
        params,
        eta_hat: es.eta_tilde,
        cond_cov: es.v_tilde,
        loglik_approx: es.laplace_loglik,
        iterations,
        converged,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Link;
    use approx::assert_relative_eq;

    fn three_cycle() -> (DesignMatrices, Vec<bool>) {
        let d = DesignMatrices::new(3, vec![(0, 1), (1, 2), (2, 0)], None).unwrap();
        (d, vec![true, true, true])
    }

    #[test]
    fn symmetric_cycle_mode_is_zero() {
        let (d, r) = three_cycle();
        let joint = JointLogDensity::new(&d, &r, Link::Probit, None, Prior::Normal(vec![1.0; 3])).unwrap();
        let mr = find_mode(&joint, &DVector::zeros(3), &Tolerances::default()).unwrap();
        assert!(mr.mode.amax() < 1e-14);
        // −H at 0: each game adds φ(0)²/Φ(0)² = 2/π to the Laplacian of the triangle, plus I.
        let c = 2.0 / PI;
        let neg_h = DMatrix::from_row_slice(3, 3, &[1.0 + 2.0 * c, -c, -c, -c, 1.0 + 2.0 * c, -c, -c, -c, 1.0 + 2.0 * c]);
        let det = neg_h.determinant();
        let want = 3.0 * 0.5f64.ln() + 0.5 * (2.0 * PI).powi(3).ln() - 0.5 * det.ln() - 1.5 * (2.0 * PI).ln();
        assert_relative_eq!(mr.laplace_loglik, want, epsilon = 1e-12);
    }

    #[test]
    fn single_game_mode_solves_stationarity() {
        let d = DesignMatrices::new(2, vec![(0, 1)], None).unwrap();
        let r = [true];
        let joint = JointLogDensity::new(&d, &r, Link::Probit, None, Prior::Normal(vec![1.0; 2])).unwrap();
        let mr = find_mode(&joint, &DVector::zeros(2), &Tolerances::default()).unwrap();
        let a = mr.mode[0];
        assert_relative_eq!(mr.mode[1], -a, epsilon = 1e-14);
        // λ(2a) = a by bisection on the 1-d stationarity condition
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if crate::normal::inv_mills(2.0 * mid) - mid > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert_relative_eq!(a, lo, epsilon = 1e-10);
        assert!((a - 0.383).abs() < 1e-3, "a = {a}");
    }

    #[test]
    fn pure_prior_estep_is_exact() {
        let d = DesignMatrices::new(3, vec![], None).unwrap();
        let joint = JointLogDensity::new(&d, &[], Link::Probit, None, Prior::Normal(vec![0.7; 3])).unwrap();
        let es = estep(&joint, &DVector::zeros(3), &Tolerances::default(), EStepOrder::FullyExponential).unwrap();
        assert!(es.eta_tilde.amax() < 1e-15);
        assert!((es.v_tilde.clone() - DMatrix::identity(3, 3) * 0.7).amax() < 1e-15);
    }

    #[test]
    fn variance_update_arithmetic() {
        let v = DMatrix::identity(2, 2);
        let eta = DVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(mstep_variance(&eta, &v, 2, FcsMode::Pooled), VarianceComponents::Pooled(2.0));
        let v = DMatrix::identity(3, 3) * 0.3;
        let z = DVector::zeros(3);
        assert_eq!(mstep_variance(&z, &v, 3, FcsMode::Consolidated), VarianceComponents::Pooled(0.3));
        let eta = DVector::from_vec(vec![1.0, 0.0, 2.0]);
        match mstep_variance(&eta, &v, 2, FcsMode::Separate) {
            VarianceComponents::Separate { fbs, fcs } => {
                assert_relative_eq!(fbs, 0.8, epsilon = 1e-15);
                assert_relative_eq!(fcs, 4.3, epsilon = 1e-15);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn beta_zero_when_fcs_results_balance() {
        // two identical FCS-visit games, one won by each side, η̃ = 0, ṽ = 0
        let d = DesignMatrices::new(2, vec![(0, 1), (0, 1)], Some(vec![1.0, 1.0])).unwrap();
        let r = [true, false];
        let eta = DVector::zeros(2);
        let v = DMatrix::zeros(2, 2);
        let b = mstep_beta(&d, &r, Link::Probit, &eta, &v, 1.0).unwrap();
        assert!(b.abs() < 1e-10, "β = {b}");
    }

    #[test]
    fn separation_is_reported() {
        let d = DesignMatrices::new(2, vec![(0, 1), (0, 1)], Some(vec![1.0, 1.0])).unwrap();
        let r = [true, true];
        let err = mstep_beta(&d, &r, Link::Probit, &DVector::zeros(2), &DMatrix::zeros(2, 2), 1.0);
        assert!(matches!(err, Err(RankError::Separation(_))));
    }
}
