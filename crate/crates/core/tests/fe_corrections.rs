//! Fully exponential corrections against finite differences of
//! K(s) = log Laplace[∫ exp(h(η) + s η_j) dη].

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankmm::em::{estep, fe_corrections, find_mode, EStepOrder};
use rankmm::model::{JointLogDensity, Link, Prior, Tolerances};
use rankmm::schedule::DesignMatrices;

/// Laplace log-integral of exp(h + s η_j), re-finding the tilted mode by Newton.
fn tilted_laplace(joint: &JointLogDensity, j: usize, s: f64, start: &DVector<f64>) -> f64 {
    let mut eta = start.clone();
    for _ in 0..100 {
        let (_, mut g, hess) = joint.evaluate(&eta);
        g[j] += s;
        let neg = -hess.to_dense();
        let step = neg.clone().cholesky().unwrap().solve(&g);
        eta += &step;
        if step.amax() < 1e-15 {
            break;
        }
    }
    let (h, _, hess) = joint.evaluate(&eta);
    let neg: DMatrix<f64> = -hess.to_dense();
    let m = eta.len() as f64;
    h + s * eta[j] + 0.5 * m * (2.0 * PI).ln() - 0.5 * neg.determinant().ln()
}

fn random_instance(rng: &mut ChaCha8Rng, m: usize, games: usize) -> (DesignMatrices, Vec<bool>, Vec<f64>) {
    let rows = (0..games)
        .map(|_| {
            let h = rng.random_range(0..m);
            (h, (h + rng.random_range(1..m)) % m)
        })
        .collect();
    let r = (0..games).map(|_| rng.random_bool(0.6)).collect();
    let var = (0..m).map(|_| rng.random_range(0.3..2.5)).collect();
    (DesignMatrices::new(m, rows, None).unwrap(), r, var)
}

#[test]
fn corrections_match_cumulant_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..20 {
        let link = if trial % 2 == 0 { Link::Probit } else { Link::Logit };
        let m = 3 + trial % 4;
        let (d, r, var) = random_instance(&mut rng, m, 2 * m + trial % 5);
        let joint = JointLogDensity::new(&d, &r, link, None, Prior::Normal(var)).unwrap();
        let mr = find_mode(&joint, &DVector::zeros(m), &Tolerances::default()).unwrap();
        let sigma = mr.chol.inverse();
        let corr = fe_corrections(&joint, &mr.mode, &sigma);
        let step = 1e-3;
        for j in 0..m {
            let kp = tilted_laplace(&joint, j, step, &mr.mode);
            let k0 = tilted_laplace(&joint, j, 0.0, &mr.mode);
            let km = tilted_laplace(&joint, j, -step, &mr.mode);
            let mean_fd = (kp - km) / (2.0 * step);
            let var_fd = (kp - 2.0 * k0 + km) / (step * step);
            let mean = mr.mode[j] + corr.mean[j];
            let v = sigma[(j, j)] + corr.var_diag[j];
            assert!((mean - mean_fd).abs() < 1e-6, "trial {trial} j {j}: mean {mean} vs {mean_fd}");
            assert!((v - var_fd).abs() < 1e-4 * v.abs().max(1.0), "trial {trial} j {j}: var {v} vs {var_fd}");
        }
    }
}

#[test]
fn estep_applies_the_corrections() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (d, r, var) = random_instance(&mut rng, 4, 7);
    let joint = JointLogDensity::new(&d, &r, Link::Probit, None, Prior::Normal(var)).unwrap();
    let tol = Tolerances::default();
    let first = estep(&joint, &DVector::zeros(4), &tol, EStepOrder::FirstOrder).unwrap();
    let full = estep(&joint, &DVector::zeros(4), &tol, EStepOrder::FullyExponential).unwrap();
    assert_eq!(first.eta_tilde, first.mode);
    let sigma = first.neg_hessian_at_mode.to_dense().try_inverse().unwrap();
    assert!((&first.v_tilde - &sigma).amax() < 1e-12);
    let corr = fe_corrections(&joint, &first.mode, &first.v_tilde);
    assert!((&full.eta_tilde - (&first.mode + &corr.mean)).amax() < 1e-12);
    for j in 0..4 {
        assert!((full.v_tilde[(j, j)] - sigma[(j, j)] - corr.var_diag[j]).abs() < 1e-12);
        for k in 0..4 {
            if j != k {
                assert!((full.v_tilde[(j, k)] - sigma[(j, k)]).abs() < 1e-12);
            }
        }
    }
}
