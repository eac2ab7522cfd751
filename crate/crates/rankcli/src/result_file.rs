//! Versioned TOML result files and run manifests.

use std::collections::BTreeMap;
use std::path::Path;

use rankmm::fit::FitResult;
use rankmm::model::{Link, Method, ParameterVector, VarianceComponents};
use rankmm::report::{RankingTable, TeamEntry, TeamFilter};
use rankmm::schedule::{Division, TeamIndex};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const RESULT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of_bytes(path: &str, bytes: &[u8]) -> Self {
        Self {
            path: path.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        }
    }
}

/// Everything needed to reproduce a command's output bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub options: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<FileDigest>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool: format!("rankcli {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            seed: None,
            cutoff: None,
            timing_ms: None,
            models: Vec::new(),
            options: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn option(&mut self, key: &str, value: impl ToString) {
        self.options.insert(key.to_string(), value.to_string());
    }

    pub fn to_toml(&self) -> CliResult<String> {
        #[derive(Serialize)]
        struct Wrapper<'a> {
            version: u32,
            manifest: &'a RunManifest,
        }
        toml::to_string(&Wrapper {
            version: RESULT_VERSION,
            manifest: self,
        })
        .map_err(|e| CliError::Data(format!("cannot serialize manifest: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub label: String,
    pub link: String,
    pub fcs_mode: u8,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_fbs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_fcs: Option<f64>,
    #[serde(default)]
    pub penalty_prior: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    pub loglik_approx: f64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamRow {
    pub name: String,
    pub division: String,
    pub rating: f64,
    pub cond_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub version: u32,
    pub model: ModelSection,
    pub estimates: Estimates,
    pub convergence: Convergence,
    pub manifest: RunManifest,
    pub teams: Vec<TeamRow>,
}

pub fn method_name(m: Method) -> String {
    match m {
        Method::PqlMl => "pql-ml".into(),
        Method::PqlReml => "pql-reml".into(),
        Method::Laplace => "la".into(),
        Method::FullyExponential => "fe".into(),
        Method::Mease => "mease".into(),
        Method::FixedVariance(v) => format!("fixed:{v}"),
    }
}

impl ResultFile {
    pub fn from_fit(fit: &FitResult, index: &TeamIndex, manifest: RunManifest) -> Self {
        let (sigma2, sigma2_fbs, sigma2_fcs) = match fit.params.variance {
            VarianceComponents::Pooled(v) => (Some(v), None, None),
            VarianceComponents::Separate { fbs, fcs } => (None, Some(fbs), Some(fcs)),
            VarianceComponents::Penalty => (None, None, None),
        };
        let teams = (0..index.len())
            .map(|j| TeamRow {
                name: index.names[j].clone(),
                division: index.divisions[j].to_string(),
                rating: fit.eta_hat[j],
                cond_var: fit.cond_cov[(j, j)],
            })
            .collect();
        Self {
            version: RESULT_VERSION,
            model: ModelSection {
                label: fit.config.label(),
                link: match fit.config.link {
                    Link::Probit => "probit".into(),
                    Link::Logit => "logit".into(),
                },
                fcs_mode: fit.config.fcs_mode.digit(),
                method: method_name(fit.config.method),
            },
            estimates: Estimates {
                beta: fit.params.beta,
                sigma2,
                sigma2_fbs,
                sigma2_fcs,
                penalty_prior: matches!(fit.params.variance, VarianceComponents::Penalty),
            },
            convergence: Convergence {
                converged: fit.converged,
                iterations: fit.iterations,
                loglik_approx: fit.loglik_approx,
                warnings: fit.warnings.clone(),
            },
            manifest,
            teams,
        }
    }

    pub fn params(&self) -> ParameterVector {
        let e = &self.estimates;
        let variance = match (e.sigma2, e.sigma2_fbs, e.sigma2_fcs) {
            (Some(v), _, _) => VarianceComponents::Pooled(v),
            (None, Some(fbs), Some(fcs)) => VarianceComponents::Separate { fbs, fcs },
            _ => VarianceComponents::Penalty,
        };
        ParameterVector {
            beta: e.beta,
            variance,
        }
    }

    pub fn ranking(&self, filter: TeamFilter) -> CliResult<RankingTable> {
        let entries = self
            .teams
            .iter()
            .map(|t| {
                let division: Division = t
                    .division
                    .parse()
                    .map_err(|e: String| CliError::Data(format!("team `{}`: {e}", t.name)))?;
                Ok(TeamEntry {
                    team: t.name.clone(),
                    division,
                    rating: t.rating,
                    cond_var: t.cond_var,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let notes = if self.convergence.converged {
            Vec::new()
        } else {
            vec![format!("{} did not converge", self.model.label)]
        };
        Ok(RankingTable::from_entries(
            entries,
            self.model.label.clone(),
            self.params(),
            notes,
            filter,
        ))
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Data(format!("cannot serialize result: {e}")))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let file: ResultFile =
            toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if file.version != RESULT_VERSION {
            return Err(CliError::Data(format!(
                "{}: result file version {} is not supported",
                path.display(),
                file.version
            )));
        }
        Ok(file)
    }
}
