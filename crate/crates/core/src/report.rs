use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lowdim,
    HdSparse,
    MlCrossfit,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Lowdim => "lowdim",
            Method::HdSparse => "hd_sparse",
            Method::MlCrossfit => "ml_crossfit",
        })
    }
}

/// Point estimate of the exposure log odds ratio with its Wald interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub beta_hat: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
    pub method: Method,
    pub converged: bool,
    pub diagnostics: BTreeMap<String, f64>,
}

/// Two-sided standard normal critical value for coverage `level`.
pub fn normal_critical_value(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("level must lie in (0, 1), got {level}")));
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(std.inverse_cdf(0.5 + level / 2.0))
}

impl EstimateReport {
    pub fn new(
        beta_hat: f64,
        se: f64,
        level: f64,
        method: Method,
        converged: bool,
        diagnostics: BTreeMap<String, f64>,
    ) -> Result<Self> {
        if !beta_hat.is_finite() {
            return Err(Error::numerical("non-finite estimate"));
        }
        if !(se.is_finite() && se > 0.0) {
            return Err(Error::numerical(format!("standard error must be positive, got {se}")));
        }
        let z = normal_critical_value(level)?;
        Ok(EstimateReport {
            beta_hat,
            se,
            ci_lower: beta_hat - z * se,
            ci_upper: beta_hat + z * se,
            level,
            method,
            converged,
            diagnostics,
        })
    }

    pub fn covers(&self, beta: f64) -> bool {
        self.ci_lower <= beta && beta <= self.ci_upper
    }
}
