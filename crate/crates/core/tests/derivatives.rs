//! Analytic derivatives against central finite differences.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rankmm::pql::{working_loglik, working_variates, VarianceMode};
use rankmm::schedule::FcsMode;
use rankmm::verify::{derivative_suite, random_mode_instance, DERIVATIVE_TOL};

#[test]
fn joint_density_gradient_and_hessian_hundred_instances() {
    let r = derivative_suite(100, 2024).unwrap();
    assert!(r.max_grad_error < DERIVATIVE_TOL, "gradient {:e}", r.max_grad_error);
    assert!(r.max_hess_error < DERIVATIVE_TOL, "hessian {:e}", r.max_hess_error);
}

#[test]
fn working_likelihood_derivatives_in_log_variance() {
    let step = 1e-5;
    let modes = [FcsMode::Consolidated, FcsMode::Pooled, FcsMode::Separate];
    for trial in 0..60 {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        rng.set_stream(trial);
        let mode = modes[trial as usize % 3];
        let link = if trial % 2 == 0 { rankmm::model::Link::Probit } else { rankmm::model::Link::Logit };
        let (design, outcomes, params, eta) = random_mode_instance(&mut rng, mode);
        // keep ν moderate: tail working responses grow like 1/λ(−ν) and swamp the differences
        let eta = eta * 0.3;
        let wm = working_variates(&design, &outcomes, link, &params, &eta, 1e-10).unwrap();
        let theta: Vec<f64> = params.variance.values().iter().map(|v| v.ln()).collect();
        for vm in [VarianceMode::Ml, VarianceMode::Reml] {
            let (_, grad, hess) = working_loglik(&wm, &design, mode, &theta, vm).unwrap();
            for k in 0..theta.len() {
                let mut up = theta.clone();
                let mut down = theta.clone();
                up[k] += step;
                down[k] -= step;
                let (fu, gu, _) = working_loglik(&wm, &design, mode, &up, vm).unwrap();
                let (fd, gd, _) = working_loglik(&wm, &design, mode, &down, vm).unwrap();
                let g_num = (fu - fd) / (2.0 * step);
                assert!(
                    (grad[k] - g_num).abs() < 1e-6 * g_num.abs().max(1.0),
                    "trial {trial} {vm:?} grad[{k}] {} vs {g_num}",
                    grad[k]
                );
                for l in 0..theta.len() {
                    let h_num = (gu[l] - gd[l]) / (2.0 * step);
                    assert!(
                        (hess[l][k] - h_num).abs() < 1e-6 * h_num.abs().max(1.0),
                        "trial {trial} {vm:?} hess[{l}][{k}] {} vs {h_num}",
                        hess[l][k]
                    );
                }
            }
        }
    }
}

#[test]
fn working_likelihood_gradient_vanishes_at_the_variance_update() {
    use rankmm::model::{Link, Method, ModelConfig};
    use rankmm::pql::lmm_solve;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (design, outcomes, params, _) = random_mode_instance(&mut rng, FcsMode::Consolidated);
    let eta = DVector::zeros(design.n_teams());
    let wm = working_variates(&design, &outcomes, Link::Probit, &params, &eta, 1e-10).unwrap();
    let config = ModelConfig::new(Link::Probit, FcsMode::Consolidated, Method::PqlMl).unwrap();
    let (next, _, _) = lmm_solve(&wm, &design, &config, VarianceMode::Ml).unwrap();
    let v = next.variance.values()[0];
    if v > 1e-9 {
        let (_, grad, _) = working_loglik(&wm, &design, FcsMode::Consolidated, &[v.ln()], VarianceMode::Ml).unwrap();
        assert!(grad[0].abs() < 1e-8, "{grad:?} at {v}");
    }
}
