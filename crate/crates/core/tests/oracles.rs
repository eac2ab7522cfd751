//! Estimators against independent optimizers, and fixed-point re-runs.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankmm::em::{estep, expected_loglik, fit_em_from, mstep_beta, EStepOrder};
use rankmm::model::{JointLogDensity, Link, Method, ModelConfig, ParameterVector, Prior, VarianceComponents};
use rankmm::oracle::{circulant_schedule, simulate_season};
use rankmm::pql::{fit_mease, fit_pql_from};
use rankmm::schedule::{DesignMatrices, FcsMode};
use rankmm::verify::random_mode_instance;

/// Maximizer of a unimodal `f` on [lo, hi].
fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > 1e-12 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn penalty_mode_matches_coordinate_golden_section() {
    for trial in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let m = 3 + (trial as usize) % 3;
        let games = 2 * m + rng.random_range(0..4);
        let rows = (0..games)
            .map(|_| {
                let h = rng.random_range(0..m);
                (h, (h + rng.random_range(1..m)) % m)
            })
            .collect();
        let outcomes: Vec<bool> = (0..games).map(|_| rng.random_bool(0.6)).collect();
        let design = DesignMatrices::new(m, rows, None).unwrap();
        let config = ModelConfig::new(Link::Probit, FcsMode::Consolidated, Method::Mease).unwrap();
        let fit = fit_mease(&design, &outcomes, &config).unwrap();

        let joint = JointLogDensity::new(&design, &outcomes, Link::Probit, None, Prior::MeasePenalty).unwrap();
        let mut eta = DVector::zeros(m);
        for _ in 0..400 {
            let before = eta.clone();
            for j in 0..m {
                let f = |x: f64| {
                    let mut e = eta.clone();
                    e[j] = x;
                    joint.value(&e)
                };
                eta[j] = golden_max(f, -8.0, 8.0);
            }
            if (&eta - &before).amax() < 1e-11 {
                break;
            }
        }
        let gap = (&fit.eta_hat - &eta).amax();
        assert!(gap < 1e-6, "trial {trial}: {gap:e}");
    }
}

#[test]
fn beta_update_maximizes_the_expected_loglik() {
    let mut checked = 0;
    for trial in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + trial);
        let link = if trial % 2 == 0 { Link::Probit } else { Link::Logit };
        let (design, outcomes, params, _) = random_mode_instance(&mut rng, FcsMode::Pooled);
        let x = design.x().unwrap();
        let visit_results: Vec<bool> = (0..design.n_games()).filter(|&i| x[i] > 0.0).map(|i| outcomes[i]).collect();
        if visit_results.iter().all(|&r| r) || visit_results.iter().all(|&r| !r) {
            continue;
        }
        let prior = Prior::from_params(&params, design.fbs_cols(), design.n_teams());
        let joint = JointLogDensity::new(&design, &outcomes, link, params.beta, prior).unwrap();
        let es = estep(&joint, &DVector::zeros(design.n_teams()), &Default::default(), EStepOrder::FirstOrder).unwrap();
        let beta = mstep_beta(&design, &outcomes, link, &es.eta_tilde, &es.v_tilde, params.beta.unwrap()).unwrap();
        let q = |b: f64| expected_loglik(&design, &outcomes, link, b, &es.eta_tilde, &es.v_tilde);
        let golden = golden_max(q, -40.0, 40.0);
        assert!((beta - golden).abs() < 1e-6, "trial {trial}: {beta} vs {golden}");
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} non-separated instances");
}

fn small_season(seed: u64) -> (DesignMatrices, Vec<bool>) {
    let design = circulant_schedule(16, 3).unwrap();
    let truth = ParameterVector {
        beta: None,
        variance: VarianceComponents::Pooled(0.8),
    };
    let season = simulate_season(&design, &truth, Link::Probit, seed, 0);
    (design, season.outcomes)
}

#[test]
fn pql_rerun_from_converged_point_stays_put() {
    for method in [Method::PqlMl, Method::PqlReml] {
        let (design, outcomes) = small_season(4);
        let config = ModelConfig::new(Link::Probit, FcsMode::Consolidated, method).unwrap();
        let first = rankmm::fit(&design, &outcomes, &config).unwrap();
        assert!(first.converged);
        let again = fit_pql_from(&design, &outcomes, &config, first.params.clone(), first.eta_hat.clone()).unwrap();
        let moved = first
            .params
            .flat()
            .iter()
            .zip(again.params.flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(moved < config.tol.param_change, "{method:?} moved {moved:e}");
    }
}

#[test]
fn em_rerun_from_converged_point_stays_put() {
    for method in [Method::Laplace, Method::FullyExponential] {
        let (design, outcomes) = small_season(8);
        let config = ModelConfig::new(Link::Probit, FcsMode::Consolidated, method).unwrap();
        let first = rankmm::fit(&design, &outcomes, &config).unwrap();
        assert!(first.converged);
        let mut one_step = config;
        one_step.tol.max_em_iter = 1;
        let again = fit_em_from(&design, &outcomes, &one_step, first.params.clone(), first.eta_hat.clone()).unwrap();
        let moved = (first.params.flat()[0] - again.params.flat()[0]).abs();
        // the relative log-likelihood rule can stop slightly before the parameter rule would
        assert!(moved < 10.0 * config.tol.param_change, "{method:?} moved {moved:e}");
    }
}

#[test]
fn pql_le_la_le_fe_on_a_small_season() {
    let (design, outcomes) = small_season(21);
    let est = |m| {
        let cfg = ModelConfig::new(Link::Probit, FcsMode::Consolidated, m).unwrap();
        rankmm::fit(&design, &outcomes, &cfg).unwrap().params.variance.values()[0]
    };
    let (pql, la, fe) = (est(Method::PqlMl), est(Method::Laplace), est(Method::FullyExponential));
    assert!(pql <= la + 1e-9 && la <= fe + 1e-9, "{pql} {la} {fe}");
}
