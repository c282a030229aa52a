//! Run configuration files (TOML, or JSON when the file name ends in `.json`).
//!
//! Every section is optional and unknown keys are rejected. Command-line
//! flags override file values.
//!
//! ```toml
//! seed = 7
//! outcome = "y"
//! exposure = "a"
//!
//! [estimator]
//! method = "ml_crossfit"
//! phi = "simp"
//! learner = { kind = "forest", trees = 300 }
//!
//! [simulation]
//! scenario = "r_correct_only"
//! replicates = 500
//! n_grid = [500, 2000]
//! ```

use std::path::{Path, PathBuf};

use drlogit_core::simulate::DgpSpec;
use drlogit_core::{EstimatorConfig, Scenario};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub estimator: EstimatorConfig,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub outcome: Option<String>,
    pub exposure: Option<String>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub simulation: SimulationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub scenario: Scenario,
    pub replicates: usize,
    pub n_grid: Vec<usize>,
    /// Covariate dimension of the built-in design.
    pub p: usize,
    /// Replaces the built-in design when set.
    pub dgp: Option<DgpSpec>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            scenario: Scenario::BothCorrect,
            replicates: 200,
            n_grid: vec![1000],
            p: 5,
            dgp: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::invalid(format!("cannot read config {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: RunConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("config {}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::invalid(format!("config {}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    /// Checks every setting without touching data.
    pub fn validate(&self) -> Result<(), CliError> {
        let est = &self.estimator;
        if !(est.level > 0.0 && est.level < 1.0) {
            return Err(CliError::invalid(format!("level must lie in (0, 1), got {}", est.level)));
        }
        est.hd.validate()?;
        est.refit.validate()?;
        est.learner.build()?;
        if self.threads == Some(0) {
            return Err(CliError::invalid("threads must be at least 1"));
        }
        let sim = &self.simulation;
        if sim.replicates < 2 {
            return Err(CliError::invalid("simulation needs at least 2 replicates"));
        }
        if sim.n_grid.is_empty() || sim.n_grid.iter().any(|&n| n < 10) {
            return Err(CliError::invalid("every simulated sample size must be at least 10"));
        }
        if let Some(dgp) = &sim.dgp {
            dgp.validate()?;
        }
        Ok(())
    }
}
