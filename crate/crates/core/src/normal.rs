//! Standard normal and logistic primitives used throughout the likelihood code.
//!
//! `log_cdf` and `inv_mills` switch to a continued-fraction Mills ratio deep in
//! the left tail so that log Φ and φ/Φ stay finite where Φ underflows.

use libm::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
/// Below this argument Φ is evaluated through the Mills ratio.
const TAIL_SWITCH: f64 = -30.0;

#[inline]
pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

#[inline]
pub fn log_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

#[inline]
pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Mills ratio R(t) = (1 - Φ(t)) / φ(t) for t > 0 by modified Lentz.
fn mills_ratio(t: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = TINY;
    let mut c = f;
    let mut d = 0.0;
    for k in 1..1000 {
        let a = if k == 1 { 1.0 } else { (k - 1) as f64 };
        let b = t;
        d = b + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    f
}

/// log Φ(x), finite for every finite x.
pub fn log_cdf(x: f64) -> f64 {
    if x < TAIL_SWITCH {
        log_pdf(x) + mills_ratio(-x).ln()
    } else if x > 5.0 {
        (-cdf(-x)).ln_1p()
    } else {
        cdf(x).ln()
    }
}

/// Inverse Mills ratio φ(x)/Φ(x).
pub fn inv_mills(x: f64) -> f64 {
    if x < TAIL_SWITCH {
        1.0 / mills_ratio(-x)
    } else {
        pdf(x) / cdf(x)
    }
}

/// Derivatives of g(x) = log Φ(x): `[g, g', g'', g''', g'''']`.
pub fn log_cdf_derivs(x: f64) -> [f64; 5] {
    let lam = inv_mills(x);
    let a = x + lam;
    let b = x + 2.0 * lam;
    let dlam = -lam * a;
    let g2 = dlam;
    let g3 = lam * a * b - lam;
    let da = 1.0 + dlam;
    let db = 1.0 + 2.0 * dlam;
    let g4 = dlam * a * b + lam * da * b + lam * a * db - dlam;
    [log_cdf(x), lam, g2, g3, g4]
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Gauss-Hermite rule for the weight e^{-x^2}: nodes ascending, weights summing to √π.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Newton iteration on the orthonormal Hermite recurrence.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "Gauss-Hermite order must be positive");
        let n = order;
        let pim4 = PI.powf(-0.25);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes[i] = z;
            weights[i] = 2.0 / (pp * pp);
        }
        // nodes[0..m] hold the positive half in descending order
        let mut full_nodes = vec![0.0; n];
        let mut full_weights = vec![0.0; n];
        for i in 0..m {
            full_nodes[i] = -nodes[i];
            full_weights[i] = weights[i];
            full_nodes[n - 1 - i] = nodes[i];
            full_weights[n - 1 - i] = weights[i];
        }
        Self {
            nodes: full_nodes,
            weights: full_weights,
        }
    }

    /// E[f(X)] for X ~ N(mean, var).
    pub fn expect_normal<F: Fn(f64) -> f64>(&self, mean: f64, var: f64, f: F) -> f64 {
        let scale = (2.0 * var.max(0.0)).sqrt();
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mean + scale * x);
        }
        acc / PI.sqrt()
    }
}
