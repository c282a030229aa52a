use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::math::{expit, softplus};

/// Known link `g` of the exposure mean model `m(x) = g(x'alpha)`.
///
/// Each link carries its antiderivative `G` so that the moment equation
/// `sum (A - g(x'alpha)) x = 0` is the stationarity condition of the
/// convex objective `sum G(x'alpha) - A x'alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinkFunction {
    #[default]
    Identity,
    #[serde(alias = "expit")]
    LogisticExpit,
    #[serde(alias = "exp")]
    Exponential,
}

impl LinkFunction {
    pub fn g(self, u: f64) -> f64 {
        match self {
            LinkFunction::Identity => u,
            LinkFunction::LogisticExpit => expit(u),
            LinkFunction::Exponential => u.exp(),
        }
    }

    pub fn g_second(self, u: f64) -> f64 {
        match self {
            LinkFunction::Identity => 0.0,
            LinkFunction::LogisticExpit => {
                let e = expit(u);
                e * (1.0 - e) * (1.0 - 2.0 * e)
            }
            LinkFunction::Exponential => u.exp(),
        }
    }

    pub fn g_prime(self, u: f64) -> f64 {
        match self {
            LinkFunction::Identity => 1.0,
            LinkFunction::LogisticExpit => {
                let e = expit(u);
                e * (1.0 - e)
            }
            LinkFunction::Exponential => u.exp(),
        }
    }

    pub fn antiderivative(self, u: f64) -> f64 {
        match self {
            LinkFunction::Identity => 0.5 * u * u,
            LinkFunction::LogisticExpit => softplus(u),
            LinkFunction::Exponential => u.exp(),
        }
    }

    /// `g(0)`; zero coefficients are optimal under full shrinkage only when this vanishes.
    pub fn at_zero(self) -> f64 {
        self.g(0.0)
    }
}

impl fmt::Display for LinkFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LinkFunction::Identity => "identity",
            LinkFunction::LogisticExpit => "expit",
            LinkFunction::Exponential => "exp",
        })
    }
}

impl FromStr for LinkFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "identity" => Ok(LinkFunction::Identity),
            "expit" | "logistic" | "logistic_expit" => Ok(LinkFunction::LogisticExpit),
            "exp" | "exponential" => Ok(LinkFunction::Exponential),
            other => Err(Error::invalid(format!("unknown link '{other}'"))),
        }
    }
}
