//! Efficiency weights `w = phi(X) e^{-r(X)}` for the weighted estimating equation.
//!
//! `phi_opt` is the variance-minimising choice when both nuisance models are
//! correct; it needs the conditional law of `A` given `X` and `Y = 0`, taken
//! as a two-point law for binary exposures and a Gaussian working model
//! (integrated by Gauss–Hermite quadrature) otherwise. `phi_simp = expit(r)`
//! is `phi_opt` evaluated at `beta = 0`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::folds::FoldPlan;
use crate::math::{clamp_prob, exp_saturating, expit};

pub const WEIGHT_MIN: f64 = 1e-6;
pub const WEIGHT_MAX: f64 = 1e6;
pub const DEFAULT_HERMITE_NODES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhiKind {
    #[default]
    None,
    Simp,
    Opt,
}

impl std::str::FromStr for PhiKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PhiKind::None),
            "simp" => Ok(PhiKind::Simp),
            "opt" => Ok(PhiKind::Opt),
            other => Err(Error::invalid(format!("unknown phi '{other}'"))),
        }
    }
}

/// Working law of `A | X, Y = 0` used by `phi_opt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "law")]
pub enum ConditionalLaw {
    /// `A ∈ {0, 1}` with `P(A = 1 | X, Y = 0) = m(X)`.
    Binary,
    /// `A ~ N(m(X), sigma2)`, integrated with `nodes`-point Gauss–Hermite.
    Gaussian { sigma2: f64, nodes: usize },
}

impl ConditionalLaw {
    /// Binary when every control exposure is 0 or 1, otherwise Gaussian with the
    /// residual variance of `a - m` over the rows in `rows`.
    pub fn detect(y: &[f64], a: &[f64], m: &[f64], rows: &[usize]) -> ConditionalLaw {
        let controls: Vec<usize> = rows.iter().copied().filter(|&i| y[i] == 0.0).collect();
        if controls.iter().all(|&i| a[i] == 0.0 || a[i] == 1.0) {
            return ConditionalLaw::Binary;
        }
        let sigma2 = controls.iter().map(|&i| (a[i] - m[i]).powi(2)).sum::<f64>()
            / controls.len().max(1) as f64;
        ConditionalLaw::Gaussian {
            sigma2: sigma2.max(1e-12),
            nodes: DEFAULT_HERMITE_NODES,
        }
    }
}

/// Gauss–Hermite rule for the weight `e^{-x^2}`, built by Golub–Welsch.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Result<Self> {
        if n < 5 {
            return Err(Error::invalid(format!("Gauss-Hermite needs at least 5 nodes, got {n}")));
        }
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                let v0 = eig.eigenvectors[(0, k)];
                (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E f(Z)` for `Z ~ N(mean, var)`.
    pub fn expect_normal(&self, mean: f64, var: f64, f: impl Fn(f64) -> f64) -> f64 {
        let s = (2.0 * var).sqrt();
        let total: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(mean + s * x))
            .sum();
        total / std::f64::consts::PI.sqrt()
    }
}

pub fn phi_simp(r_val: f64) -> f64 {
    expit(r_val)
}

/// Evaluates `phi_opt` repeatedly for a fixed law and pilot `beta`.
#[derive(Debug, Clone)]
pub struct PhiOpt {
    law: ConditionalLaw,
    rule: Option<GaussHermite>,
    beta_pilot: f64,
}

impl PhiOpt {
    pub fn new(law: ConditionalLaw, beta_pilot: f64) -> Result<Self> {
        let rule = match law {
            ConditionalLaw::Binary => None,
            ConditionalLaw::Gaussian { sigma2, nodes } => {
                if !(sigma2.is_finite() && sigma2 > 0.0) {
                    return Err(Error::invalid("Gaussian working law needs a positive variance"));
                }
                Some(GaussHermite::new(nodes)?)
            }
        };
        Ok(PhiOpt {
            law,
            rule,
            beta_pilot,
        })
    }

    /// `E[(A - m)^2 | X, Y=0] / E[(A - m)^2 / expit(beta A + r) | X, Y=0]`.
    pub fn eval(&self, r_val: f64, m_val: f64) -> Result<f64> {
        let beta = self.beta_pilot;
        // 1 / expit(u) = 1 + e^{-u}
        let inv_expit = |u: f64| 1.0 + exp_saturating(-u).0;
        let (num, den) = match (self.law, &self.rule) {
            (ConditionalLaw::Binary, _) => {
                let (m, _) = clamp_prob(m_val, 1e-9);
                let num = m * (1.0 - m) * (1.0 - m) + (1.0 - m) * m * m;
                let den = m * (1.0 - m).powi(2) * inv_expit(beta + r_val)
                    + (1.0 - m) * m * m * inv_expit(r_val);
                (num, den)
            }
            (ConditionalLaw::Gaussian { sigma2, .. }, Some(rule)) => {
                let num = rule.expect_normal(m_val, sigma2, |a| (a - m_val).powi(2));
                let den = rule.expect_normal(m_val, sigma2, |a| {
                    (a - m_val).powi(2) * inv_expit(beta * a + r_val)
                });
                (num, den)
            }
            (ConditionalLaw::Gaussian { .. }, None) => unreachable!("rule built in new"),
        };
        if den < 1e-12 {
            return Err(Error::numerical("phi_opt denominator below 1e-12"));
        }
        Ok(num / den)
    }
}

pub fn phi_opt(r_val: f64, m_val: f64, beta_pilot: f64, law: ConditionalLaw) -> Result<f64> {
    PhiOpt::new(law, beta_pilot)?.eval(r_val, m_val)
}

/// Which efficiency weight to use, with the pilot estimate needed by `opt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiSpec {
    pub kind: PhiKind,
    pub beta_pilot: f64,
}

impl PhiSpec {
    pub fn none() -> Self {
        PhiSpec {
            kind: PhiKind::None,
            beta_pilot: 0.0,
        }
    }

    pub fn simp() -> Self {
        PhiSpec {
            kind: PhiKind::Simp,
            beta_pilot: 0.0,
        }
    }

    pub fn opt(beta_pilot: f64) -> Self {
        PhiSpec {
            kind: PhiKind::Opt,
            beta_pilot,
        }
    }
}

fn clamp_weight(w: f64) -> f64 {
    w.clamp(WEIGHT_MIN, WEIGHT_MAX)
}

/// Weights `phi^{[-k(i)]}(X_i) e^{-r^{[-k(i)]}(X_i)}` from out-of-fold nuisance values.
///
/// `r_oof[i]` and `m_oof[i]` must come from nuisance fits that excluded the
/// fold of row `i`; `laws[k - 1]` is the working law fitted without fold `k`.
pub fn build_weights(
    plan: &FoldPlan,
    r_oof: &[f64],
    m_oof: &[f64],
    spec: &PhiSpec,
    laws: &[ConditionalLaw],
) -> Result<Vec<f64>> {
    let n = plan.n();
    if r_oof.len() != n || m_oof.len() != n {
        return Err(Error::invalid("out-of-fold predictions do not match the fold plan"));
    }
    match spec.kind {
        PhiKind::None => Ok(vec![1.0; n]),
        // expit(r) e^{-r} = 1 / (1 + e^r)
        PhiKind::Simp => Ok(r_oof.iter().map(|&r| clamp_weight(expit(-r))).collect()),
        PhiKind::Opt => {
            if laws.len() != plan.k() {
                return Err(Error::invalid(format!(
                    "{} conditional laws for {} folds",
                    laws.len(),
                    plan.k()
                )));
            }
            let evals = laws
                .iter()
                .map(|&law| PhiOpt::new(law, spec.beta_pilot))
                .collect::<Result<Vec<_>>>()?;
            (0..n)
                .map(|i| {
                    let phi = evals[plan.label(i) - 1].eval(r_oof[i], m_oof[i])?;
                    Ok(clamp_weight(phi * exp_saturating(-r_oof[i]).0))
                })
                .collect()
        }
    }
}
