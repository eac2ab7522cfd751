//! Fit results and the method dispatcher.

use nalgebra::{DMatrix, DVector};

use crate::em;
use crate::error::Result;
use crate::model::{Method, ModelConfig, ParameterVector};
use crate::pql;
use crate::schedule::DesignMatrices;

#[derive(Debug, Clone)]
pub struct FitResult {
    pub config: ModelConfig,
    pub params: ParameterVector,
    /// Team ratings η̃.
    pub eta_hat: DVector<f64>,
    /// Conditional covariance ṽ of the team effects.
    pub cond_cov: DMatrix<f64>,
    pub loglik_approx: f64,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn cond_var(&self) -> Vec<f64> {
        self.cond_cov.diagonal().iter().copied().collect()
    }

    pub fn std_errors(&self) -> Vec<f64> {
        self.cond_cov.diagonal().iter().map(|v| v.sqrt()).collect()
    }
}

/// Fits `config` from the default starting values.
pub fn fit(design: &DesignMatrices, outcomes: &[bool], config: &ModelConfig) -> Result<FitResult> {
    let start = ParameterVector::initial(config);
    let eta = DVector::zeros(design.n_teams());
    fit_from(design, outcomes, config, start, eta)
}

/// Fits `config` starting from the given parameters and ratings.
pub fn fit_from(
    design: &DesignMatrices,
    outcomes: &[bool],
    config: &ModelConfig,
    start: ParameterVector,
    eta: DVector<f64>,
) -> Result<FitResult> {
    config.validate()?;
    match config.method {
        Method::PqlMl | Method::PqlReml | Method::FixedVariance(_) => {
            pql::fit_pql_from(design, outcomes, config, start, eta)
        }
        Method::Mease => pql::fit_mease(design, outcomes, config),
        Method::Laplace | Method::FullyExponential => em::fit_em_from(design, outcomes, config, start, eta),
    }
}
