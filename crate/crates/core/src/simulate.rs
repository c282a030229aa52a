//! Data-generating processes with known nuisance functions, the first-order
//! bias decomposition, and the Monte Carlo replicate engine.
//!
//! Two families are provided.
//!
//! *Conditional Gaussian*: `Y ~ Bernoulli(pi)` and `(A, X) | Y = j ~ N(mu_j, Sigma)`.
//! Then `P(Y = 1 | A, X)` is exactly logistic-linear with coefficients
//! `Sigma^-1 (mu_1 - mu_0)` and `E[A | X, Y = 0]` is linear in `X`.
//!
//! *Factorized*: `Y ~ Bernoulli(pi)`, `X | Y = j` independent normal
//! coordinates, and
//!
//! ```text
//! A | X, Y = 0 ~ N(m0(X), s2),     A | X, Y = 1 ~ N(m0(X) + beta0 s2, s2).
//! ```
//!
//! The odds ratio `p(a | x, 1) / p(a | x, 0)` is proportional to `e^{beta0 a}`,
//! so the partially linear logistic model holds with
//! `r0(x) = logit pi + log f1(x)/f0(x) - beta0 m0(x) - beta0^2 s2 / 2`.
//! A quadratic term in `m0` and a different variance of `X_1` among cases make
//! either nuisance nonlinear, or cancel each other to keep `r0` linear.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NuisancePredictions};
use crate::error::{Error, Result};
use crate::estimator::EstimatorConfig;
use crate::math::{exp_saturating, expit, logit};
use crate::report::Method;
use crate::seed::{derive_seed, tag};

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    #[default]
    CondGaussian,
    LogisticLinear,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    #[default]
    BothCorrect,
    RCorrectOnly,
    MCorrectOnly,
    BothWrong,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::BothCorrect,
        Scenario::RCorrectOnly,
        Scenario::MCorrectOnly,
        Scenario::BothWrong,
    ];

    /// Whether at least one linear working model is correct.
    pub fn validity_guaranteed(self) -> bool {
        self != Scenario::BothWrong
    }

    fn nonlinearity(self, beta0: f64) -> Nonlinearity {
        match self {
            Scenario::BothCorrect => Nonlinearity::default(),
            Scenario::RCorrectOnly => Nonlinearity {
                m_quad: 0.25,
                x1_var_treated: 1.0 / (1.0 - 2.0 * beta0 * 0.25),
            },
            Scenario::MCorrectOnly => Nonlinearity {
                m_quad: 0.0,
                x1_var_treated: 2.0,
            },
            Scenario::BothWrong => Nonlinearity {
                m_quad: 0.25,
                x1_var_treated: 1.0,
            },
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::BothCorrect => "both_correct",
            Scenario::RCorrectOnly => "r_correct_only",
            Scenario::MCorrectOnly => "m_correct_only",
            Scenario::BothWrong => "both_wrong",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.to_string() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown scenario '{s}' (expected both_correct, r_correct_only, m_correct_only or both_wrong)"
                ))
            })
    }
}

/// Departures from linearity in the factorized family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Nonlinearity {
    /// Coefficient `q` of `X_1^2 - 1` in `m0`.
    pub m_quad: f64,
    /// Variance of `X_1` among cases (1 among controls).
    pub x1_var_treated: f64,
}

impl Default for Nonlinearity {
    fn default() -> Self {
        Nonlinearity {
            m_quad: 0.0,
            x1_var_treated: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n: usize,
    pub p: usize,
    /// Implied by `mu0`, `mu1`, `sigma` for the conditional Gaussian family.
    pub beta0: f64,
    pub pi_y: f64,
    /// Means of `(A, X)` given `Y = 0` and `Y = 1` (conditional Gaussian).
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    /// Covariance of `(A, X)` given `Y` (conditional Gaussian), row-major.
    pub sigma: Vec<Vec<f64>>,
    /// `E[X | Y = 1]` (factorized; `E[X | Y = 0] = 0`).
    pub x_shift: Vec<f64>,
    /// Intercept followed by `p` slopes of the linear part of `m0` (factorized).
    pub m_coef: Vec<f64>,
    /// Variance of `A` given `(X, Y)` (factorized).
    pub a_var: f64,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl DgpSpec {
    /// Conditional Gaussian design in which `X | Y` has identity covariance and
    /// `A = alpha0'X + e` with unit noise variance among controls:
    /// `Sigma = [[1 + |alpha0|^2, alpha0'], [alpha0, I]]`, `mu0 = 0` and
    /// `mu1 = Sigma (beta0, gamma0)`, so the logistic coefficients are exactly
    /// `(beta0, gamma0)` and `m0(x) = alpha0'x`.
    ///
    /// The factorized fields are filled so that the same law is obtained from
    /// the factorized family with no nonlinearity.
    pub fn cond_gaussian(n: usize, beta0: f64, gamma0: &[f64], alpha0: &[f64], pi_y: f64) -> Self {
        let p = gamma0.len();
        assert_eq!(alpha0.len(), p, "alpha0 and gamma0 must have the same length");
        let mut sigma = vec![vec![0.0; p + 1]; p + 1];
        sigma[0][0] = 1.0 + alpha0.iter().map(|v| v * v).sum::<f64>();
        for j in 0..p {
            sigma[0][j + 1] = alpha0[j];
            sigma[j + 1][0] = alpha0[j];
            sigma[j + 1][j + 1] = 1.0;
        }
        let mut theta = vec![beta0];
        theta.extend_from_slice(gamma0);
        let mu1 = sigma
            .iter()
            .map(|row| row.iter().zip(&theta).map(|(s, t)| s * t).sum())
            .collect();
        let x_shift = (0..p).map(|j| beta0 * alpha0[j] + gamma0[j]).collect();
        let mut m_coef = vec![0.0];
        m_coef.extend_from_slice(alpha0);
        DgpSpec {
            kind: DgpKind::CondGaussian,
            n,
            p,
            beta0,
            pi_y,
            mu0: vec![0.0; p + 1],
            mu1,
            sigma,
            x_shift,
            m_coef,
            a_var: 1.0,
            nonlinearity: Nonlinearity::default(),
            seed: 0,
        }
    }

    /// `beta0 = 0.5`, `gamma0 = (0.5, -0.5, 0.25, 0, ...)`,
    /// `alpha0 = (0.5, 0.3, 0, ...)`, balanced outcome.
    pub fn standard(n: usize, p: usize) -> Self {
        let mut gamma0 = vec![0.0; p];
        for (g, v) in gamma0.iter_mut().zip([0.5, -0.5, 0.25]) {
            *g = v;
        }
        let mut alpha0 = vec![0.0; p];
        for (a, v) in alpha0.iter_mut().zip([0.5, 0.3]) {
            *a = v;
        }
        DgpSpec::cond_gaussian(n, 0.5, &gamma0, &alpha0, 0.5)
    }

    /// The standard design with the nonlinearities of `scenario`.
    pub fn for_scenario(scenario: Scenario, n: usize, p: usize) -> Self {
        let mut spec = DgpSpec::standard(n, p);
        if scenario != Scenario::BothCorrect {
            spec.kind = DgpKind::Nonlinear;
            spec.nonlinearity = scenario.nonlinearity(spec.beta0);
        }
        spec
    }

    /// Factorized design with nonlinear `r0` and `m0`.
    pub fn nonlinear(n: usize, p: usize) -> Self {
        DgpSpec::for_scenario(Scenario::BothWrong, n, p)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid("n must be at least 2"));
        }
        if !(self.pi_y > 0.0 && self.pi_y < 1.0) {
            return Err(Error::invalid("pi_y must lie in (0, 1)"));
        }
        match self.kind {
            DgpKind::CondGaussian => {
                let d = self.p + 1;
                if self.mu0.len() != d || self.mu1.len() != d || self.sigma.len() != d {
                    return Err(Error::invalid("mu0, mu1 and sigma must have dimension p + 1"));
                }
                if self.sigma.iter().any(|r| r.len() != d) {
                    return Err(Error::invalid("sigma must be square"));
                }
            }
            DgpKind::LogisticLinear | DgpKind::Nonlinear => {
                if self.x_shift.len() != self.p || self.m_coef.len() != self.p + 1 {
                    return Err(Error::invalid("x_shift needs p entries and m_coef p + 1"));
                }
                if !(self.a_var > 0.0) {
                    return Err(Error::invalid("a_var must be positive"));
                }
                let nl = self.nonlinearity;
                if !(nl.x1_var_treated > 0.0) || (self.p == 0 && nl != Nonlinearity::default()) {
                    return Err(Error::invalid("invalid nonlinearity"));
                }
                if self.kind == DgpKind::LogisticLinear && nl != Nonlinearity::default() {
                    return Err(Error::invalid("logistic_linear takes no nonlinearity"));
                }
            }
        }
        Ok(())
    }
}

/// Which linear working models are correctly specified for a generated design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCorrectness {
    pub r_linear: bool,
    pub m_linear: bool,
}

#[derive(Debug, Clone, PartialEq)]
enum TruthModel {
    Gaussian {
        r_intercept: f64,
        gamma0: Vec<f64>,
        m_intercept: f64,
        alpha0: Vec<f64>,
        /// `logit P(Y = 1 | X)`: intercept and slopes.
        case_intercept: f64,
        case_coef: Vec<f64>,
        /// Variance of `A` given `(X, Y)`.
        tau2: f64,
    },
    Factorized {
        logit_pi: f64,
        x_shift: Vec<f64>,
        m_coef: Vec<f64>,
        nl: Nonlinearity,
        a_var: f64,
    },
}

/// Known parameter and nuisance functions of a design.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub beta0: f64,
    model: TruthModel,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

impl Truth {
    /// `r0(x)`.
    pub fn r0(&self, x: &[f64]) -> f64 {
        match &self.model {
            TruthModel::Gaussian { r_intercept, gamma0, .. } => r_intercept + dot(gamma0, x),
            TruthModel::Factorized { logit_pi, a_var, .. } => {
                logit_pi + self.log_density_ratio(x) - self.beta0 * self.m0(x) - 0.5 * self.beta0 * self.beta0 * a_var
            }
        }
    }

    /// `m0(x) = E[A | X = x, Y = 0]`.
    pub fn m0(&self, x: &[f64]) -> f64 {
        match &self.model {
            TruthModel::Gaussian {
                m_intercept, alpha0, ..
            } => m_intercept + dot(alpha0, x),
            TruthModel::Factorized { m_coef, nl, .. } => {
                let quad = if x.is_empty() { 0.0 } else { nl.m_quad * (x[0] * x[0] - 1.0) };
                m_coef[0] + dot(&m_coef[1..], x) + quad
            }
        }
    }

    /// `log f(x | Y = 1) / f(x | Y = 0)` for the factorized family.
    fn log_density_ratio(&self, x: &[f64]) -> f64 {
        match &self.model {
            TruthModel::Gaussian { .. } => unreachable!(),
            TruthModel::Factorized { x_shift, nl, .. } => {
                let mut s = 0.0;
                for (j, (&xj, &sj)) in x.iter().zip(x_shift).enumerate() {
                    let d1 = if j == 0 { nl.x1_var_treated } else { 1.0 };
                    s += -(xj - sj).powi(2) / (2.0 * d1) + xj * xj / 2.0 - 0.5 * d1.ln();
                }
                s
            }
        }
    }

    /// `P(Y = 1 | X = x)`.
    pub fn case_prob(&self, x: &[f64]) -> f64 {
        match &self.model {
            TruthModel::Gaussian {
                case_intercept,
                case_coef,
                ..
            } => expit(case_intercept + dot(case_coef, x)),
            TruthModel::Factorized { logit_pi, .. } => expit(logit_pi + self.log_density_ratio(x)),
        }
    }

    fn a_var(&self) -> f64 {
        match &self.model {
            TruthModel::Gaussian { tau2, .. } => *tau2,
            TruthModel::Factorized { a_var, .. } => *a_var,
        }
    }

    /// `E[A | X = x]`, averaging over the outcome.
    pub fn a_mean(&self, x: &[f64]) -> f64 {
        self.m0(x) + self.beta0 * self.a_var() * self.case_prob(x)
    }

    /// Linear coefficients `(intercept, gamma0)` of `r0` when it is linear.
    pub fn gamma0(&self) -> Option<(f64, &[f64])> {
        match &self.model {
            TruthModel::Gaussian { r_intercept, gamma0, .. } => Some((*r_intercept, gamma0)),
            TruthModel::Factorized { .. } => None,
        }
    }

    /// Linear coefficients `(intercept, alpha0)` of `m0` when it is linear.
    pub fn alpha0(&self) -> Option<(f64, &[f64])> {
        match &self.model {
            TruthModel::Gaussian {
                m_intercept, alpha0, ..
            } => Some((*m_intercept, alpha0)),
            TruthModel::Factorized { m_coef, nl, .. } if nl.m_quad == 0.0 => Some((m_coef[0], &m_coef[1..])),
            TruthModel::Factorized { .. } => None,
        }
    }

    pub fn r0_all(&self, x: &DMatrix<f64>) -> Vec<f64> {
        rows(x).map(|r| self.r0(&r)).collect()
    }

    pub fn m0_all(&self, x: &DMatrix<f64>) -> Vec<f64> {
        rows(x).map(|r| self.m0(&r)).collect()
    }

    /// The true nuisance values at every observation.
    pub fn oracle(&self, data: &Dataset) -> Result<NuisancePredictions> {
        NuisancePredictions::new(self.r0_all(data.x()), self.m0_all(data.x()))
    }
}

fn rows(x: &DMatrix<f64>) -> impl Iterator<Item = Vec<f64>> + '_ {
    (0..x.nrows()).map(move |i| x.row(i).iter().copied().collect())
}

enum Sampler {
    Gaussian {
        chol_l: DMatrix<f64>,
        mu0: DVector<f64>,
        mu1: DVector<f64>,
    },
    Factorized,
}

/// A prepared generator: factorizations are done once, then any number of
/// datasets can be drawn.
pub struct Dgp {
    spec: DgpSpec,
    truth: Truth,
    correctness: ModelCorrectness,
    sampler: Sampler,
}

impl Dgp {
    pub fn new(spec: &DgpSpec) -> Result<Self> {
        spec.validate()?;
        let p = spec.p;
        match spec.kind {
            DgpKind::CondGaussian => {
                let d = p + 1;
                let sigma = DMatrix::from_fn(d, d, |i, j| spec.sigma[i][j]);
                if (0..d).any(|i| (0..i).any(|j| sigma[(i, j)] != sigma[(j, i)])) {
                    return Err(Error::invalid("sigma must be symmetric"));
                }
                let chol: Cholesky<f64, Dyn> = sigma
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::invalid("sigma is not positive definite (Cholesky failed)"))?;
                let mu0 = DVector::from_vec(spec.mu0.clone());
                let mu1 = DVector::from_vec(spec.mu1.clone());
                let theta = chol.solve(&(&mu1 - &mu0));
                let q1 = mu1.dot(&chol.solve(&mu1));
                let q0 = mu0.dot(&chol.solve(&mu0));
                let r_intercept = logit(spec.pi_y) - 0.5 * (q1 - q0);
                if (theta[0] - spec.beta0).abs() > 1e-8 * (1.0 + spec.beta0.abs()) {
                    return Err(Error::invalid(format!(
                        "beta0 = {} disagrees with the value {} implied by mu and sigma",
                        spec.beta0, theta[0]
                    )));
                }

                // Gaussian conditioning of A on X, and the marginal law of X.
                let (alpha0, m_intercept, tau2, case_coef, case_intercept) = if p == 0 {
                    (vec![], spec.mu0[0], sigma[(0, 0)], vec![], logit(spec.pi_y))
                } else {
                    let sxx = sigma.view((1, 1), (p, p)).into_owned();
                    let sxa = sigma.view((1, 0), (p, 1)).column(0).into_owned();
                    let cxx = sxx
                        .cholesky()
                        .ok_or_else(|| Error::invalid("covariance of X is not positive definite"))?;
                    let alpha = cxx.solve(&sxa);
                    let mu0x = mu0.rows(1, p).into_owned();
                    let mu1x = mu1.rows(1, p).into_owned();
                    let m_int = mu0[0] - alpha.dot(&mu0x);
                    let tau2 = sigma[(0, 0)] - sxa.dot(&alpha);
                    let cc = cxx.solve(&(&mu1x - &mu0x));
                    let ci = logit(spec.pi_y) - 0.5 * (mu1x.dot(&cxx.solve(&mu1x)) - mu0x.dot(&cxx.solve(&mu0x)));
                    (alpha.iter().copied().collect(), m_int, tau2, cc.iter().copied().collect(), ci)
                };
                Ok(Dgp {
                    spec: spec.clone(),
                    truth: Truth {
                        beta0: theta[0],
                        model: TruthModel::Gaussian {
                            r_intercept,
                            gamma0: theta.rows(1, p).iter().copied().collect(),
                            m_intercept,
                            alpha0,
                            case_intercept,
                            case_coef,
                            tau2,
                        },
                    },
                    correctness: ModelCorrectness {
                        r_linear: true,
                        m_linear: true,
                    },
                    sampler: Sampler::Gaussian {
                        chol_l: chol.l(),
                        mu0,
                        mu1,
                    },
                })
            }
            DgpKind::LogisticLinear | DgpKind::Nonlinear => {
                let nl = spec.nonlinearity;
                // Coefficient of X_1^2 in r0.
                let r_quad = -0.5 / nl.x1_var_treated + 0.5 - spec.beta0 * nl.m_quad;
                Ok(Dgp {
                    spec: spec.clone(),
                    truth: Truth {
                        beta0: spec.beta0,
                        model: TruthModel::Factorized {
                            logit_pi: logit(spec.pi_y),
                            x_shift: spec.x_shift.clone(),
                            m_coef: spec.m_coef.clone(),
                            nl,
                            a_var: spec.a_var,
                        },
                    },
                    correctness: ModelCorrectness {
                        r_linear: r_quad.abs() < 1e-12,
                        m_linear: nl.m_quad == 0.0,
                    },
                    sampler: Sampler::Factorized,
                })
            }
        }
    }

    /// Conditional Gaussian or factorized generator for `scenario`, built from
    /// the linear parts of `spec`.
    pub fn for_scenario(spec: &DgpSpec, scenario: Scenario) -> Result<Self> {
        if scenario == Scenario::BothCorrect {
            return Dgp::new(spec);
        }
        let s = DgpSpec {
            kind: DgpKind::Nonlinear,
            nonlinearity: scenario.nonlinearity(spec.beta0),
            ..spec.clone()
        };
        Dgp::new(&s)
    }

    pub fn spec(&self) -> &DgpSpec {
        &self.spec
    }

    pub fn truth(&self) -> &Truth {
        &self.truth
    }

    pub fn correctness(&self) -> ModelCorrectness {
        self.correctness
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let p = self.spec.p;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        let mut x = DMatrix::zeros(n, p);
        match &self.sampler {
            Sampler::Gaussian { chol_l, mu0, mu1 } => {
                let d = p + 1;
                let mut z = DMatrix::zeros(n, d);
                for i in 0..n {
                    y.push(if rng.random::<f64>() < self.spec.pi_y { 1.0 } else { 0.0 });
                    for j in 0..d {
                        z[(i, j)] = rng.sample::<f64, _>(StandardNormal);
                    }
                }
                let v = z * chol_l.transpose();
                for i in 0..n {
                    let mu = if y[i] == 1.0 { mu1 } else { mu0 };
                    a.push(v[(i, 0)] + mu[0]);
                    for j in 0..p {
                        x[(i, j)] = v[(i, j + 1)] + mu[j + 1];
                    }
                }
            }
            Sampler::Factorized => {
                let s = &self.spec;
                let mut row = vec![0.0; p];
                for i in 0..n {
                    let yi = if rng.random::<f64>() < s.pi_y { 1.0 } else { 0.0 };
                    for j in 0..p {
                        let sd = if j == 0 && yi == 1.0 {
                            s.nonlinearity.x1_var_treated.sqrt()
                        } else {
                            1.0
                        };
                        row[j] = yi * s.x_shift[j] + sd * rng.sample::<f64, _>(StandardNormal);
                        x[(i, j)] = row[j];
                    }
                    let mean = self.truth.m0(&row) + yi * s.beta0 * s.a_var;
                    a.push(mean + s.a_var.sqrt() * rng.sample::<f64, _>(StandardNormal));
                    y.push(yi);
                }
            }
        }
        Dataset::new(y, a, x, None)
    }
}

/// Draws `spec.n` observations from the conditional Gaussian model.
pub fn gen_conditional_gaussian(spec: &DgpSpec) -> Result<(Dataset, Truth)> {
    if spec.kind != DgpKind::CondGaussian {
        return Err(Error::invalid("spec is not a conditional Gaussian design"));
    }
    let dgp = Dgp::new(spec)?;
    let data = dgp.sample(spec.n, spec.seed)?;
    Ok((data, dgp.truth))
}

/// Draws `spec.n` observations with the nuisance misspecification of `scenario`.
pub fn gen_misspec(spec: &DgpSpec, scenario: Scenario) -> Result<(Dataset, Truth, ModelCorrectness)> {
    let dgp = Dgp::for_scenario(spec, scenario)?;
    let data = dgp.sample(spec.n, spec.seed)?;
    let c = dgp.correctness;
    Ok((data, dgp.truth, c))
}

/// First-order expansion of the estimating equation around reference
/// nuisances `(r_bar, m_bar)`:
///
/// ```text
/// lhs = main - delta_m - delta_r + remainder
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasDecomposition {
    /// `n^-1 sum h(beta; r_hat, m_hat)`.
    pub lhs: f64,
    /// `n^-1 sum h(beta; r_bar, m_bar)`.
    pub main: f64,
    pub delta_m: f64,
    pub delta_r: f64,
    /// Second-order term, computed from its own closed form.
    pub remainder: f64,
}

impl BiasDecomposition {
    /// `lhs - (main - delta_m - delta_r + remainder)`; zero up to rounding.
    pub fn reconstruction_error(&self) -> f64 {
        self.lhs - (self.main - self.delta_m - self.delta_r + self.remainder)
    }
}

pub fn bias_decomposition(
    data: &Dataset,
    hat: &NuisancePredictions,
    bar: &NuisancePredictions,
    beta: f64,
) -> Result<BiasDecomposition> {
    let n = data.n();
    if hat.len() != n || bar.len() != n {
        return Err(Error::invalid("prediction length differs from sample size"));
    }
    let (y, a) = (data.y(), data.a());
    let (rh, mh, rb, mb) = (hat.r_hat(), hat.m_hat(), bar.r_hat(), bar.m_hat());
    let mut out = BiasDecomposition {
        lhs: 0.0,
        main: 0.0,
        delta_m: 0.0,
        delta_r: 0.0,
        remainder: 0.0,
    };
    for i in 0..n {
        let treated = y[i] * exp_saturating(-beta * a[i]).0;
        let ctrl = 1.0 - y[i];
        let (eh, eb) = (exp_saturating(rh[i]).0, exp_saturating(rb[i]).0);
        out.lhs += (treated - ctrl * eh) * (a[i] - mh[i]);
        out.main += (treated - ctrl * eb) * (a[i] - mb[i]);
        out.delta_m += (treated - ctrl * eb) * (mh[i] - mb[i]);
        out.delta_r += ctrl * eb * (rh[i] - rb[i]) * (a[i] - mb[i]);
        out.remainder += ctrl * (eb * (rh[i] - rb[i]) * (a[i] - mb[i]) - (eh - eb) * (a[i] - mh[i]));
    }
    let nf = n as f64;
    out.lhs /= nf;
    out.main /= nf;
    out.delta_m /= nf;
    out.delta_r /= nf;
    out.remainder /= nf;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub estimator: EstimatorConfig,
    pub scenario: Scenario,
    pub replicates: usize,
    pub n_grid: Vec<usize>,
    pub level: f64,
    pub seed: u64,
    /// Worker threads; `None` uses the ambient pool.
    pub threads: Option<usize>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            estimator: EstimatorConfig::default(),
            scenario: Scenario::BothCorrect,
            replicates: 200,
            n_grid: vec![1000],
            level: 0.95,
            seed: 0,
            threads: None,
        }
    }
}

/// Outcome of one replicate; failed replicates carry the error message and
/// `NaN` estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub n: usize,
    pub index: usize,
    pub seed: u64,
    pub beta_hat: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub covered: bool,
    pub converged: bool,
    pub error: Option<String>,
    /// Diagnostics of the fit (empty for failed replicates).
    pub diagnostics: BTreeMap<String, f64>,
}

impl Replicate {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub replicates: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub mean_beta_hat: f64,
    pub bias: f64,
    /// Standard deviation of the estimates across replicates.
    pub mc_sd: f64,
    /// Monte Carlo standard error of `mean_beta_hat`.
    pub mc_se_bias: f64,
    pub mean_se: f64,
    pub coverage: f64,
    pub rmse: f64,
}

impl Summary {
    fn from_replicates(n: usize, beta0: f64, reps: &[Replicate]) -> Summary {
        let ok: Vec<&Replicate> = reps.iter().filter(|r| !r.failed()).collect();
        let k = ok.len() as f64;
        let mean = ok.iter().map(|r| r.beta_hat).sum::<f64>() / k;
        let var = ok.iter().map(|r| (r.beta_hat - mean).powi(2)).sum::<f64>() / (k - 1.0);
        Summary {
            n,
            replicates: reps.len(),
            failures: reps.len() - ok.len(),
            failure_rate: (reps.len() - ok.len()) as f64 / reps.len() as f64,
            mean_beta_hat: mean,
            bias: mean - beta0,
            mc_sd: var.sqrt(),
            mc_se_bias: (var / k).sqrt(),
            mean_se: ok.iter().map(|r| r.se).sum::<f64>() / k,
            coverage: ok.iter().filter(|r| r.covered).count() as f64 / k,
            rmse: (ok.iter().map(|r| (r.beta_hat - beta0).powi(2)).sum::<f64>() / k).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloResult {
    pub scenario: Scenario,
    pub method: Method,
    pub beta0: f64,
    /// False when neither working model is correct; coverage then carries
    /// no guarantee.
    pub validity_guaranteed: bool,
    pub replicates: Vec<Replicate>,
    pub summaries: Vec<Summary>,
}

impl MonteCarloResult {
    /// Least-squares slope of `log mc_sd` on `log n` across the grid.
    pub fn mc_sd_slope(&self) -> Option<f64> {
        log_log_slope(self.summaries.iter().map(|s| (s.n as f64, s.mc_sd)))
    }
}

/// Least-squares slope of `log y` on `log x`.
pub fn log_log_slope(points: impl Iterator<Item = (f64, f64)>) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points.map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn run_one(dgp: &Dgp, cfg: &ScenarioConfig, estimator: &EstimatorConfig, n: usize, index: usize) -> Replicate {
    let seed = derive_seed(cfg.seed, &[tag::REPLICATE, n as u64, index as u64]);
    let beta0 = dgp.truth.beta0;
    let fitted = dgp
        .sample(n, seed)
        .and_then(|data| estimator.fit(&data, derive_seed(seed, &[tag::REPLICATE])));
    match fitted {
        Ok(rep) => Replicate {
            n,
            index,
            seed,
            beta_hat: rep.beta_hat,
            se: rep.se,
            ci_lower: rep.ci_lower,
            ci_upper: rep.ci_upper,
            covered: rep.covers(beta0),
            converged: rep.converged,
            error: None,
            diagnostics: rep.diagnostics,
        },
        Err(e) => Replicate {
            n,
            index,
            seed,
            beta_hat: f64::NAN,
            se: f64::NAN,
            ci_lower: f64::NAN,
            ci_upper: f64::NAN,
            covered: false,
            converged: false,
            error: Some(e.to_string()),
            diagnostics: BTreeMap::new(),
        },
    }
}

/// Runs `cfg.replicates` independent fits for every sample size in
/// `cfg.n_grid`. Replicate seeds depend only on `(cfg.seed, n, index)`, so
/// results do not depend on the number of threads.
pub fn run_monte_carlo(cfg: &ScenarioConfig, dgp: &DgpSpec) -> Result<MonteCarloResult> {
    if cfg.replicates < 2 {
        return Err(Error::invalid("need at least 2 replicates"));
    }
    if cfg.n_grid.is_empty() {
        return Err(Error::invalid("n_grid is empty"));
    }
    let gen = Dgp::for_scenario(dgp, cfg.scenario)?;
    let estimator = EstimatorConfig {
        level: cfg.level,
        ..cfg.estimator.clone()
    };
    let jobs: Vec<(usize, usize)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.replicates).map(move |r| (n, r)))
        .collect();
    let work = || -> Vec<Replicate> {
        jobs.par_iter()
            .map(|&(n, r)| run_one(&gen, cfg, &estimator, n, r))
            .collect()
    };
    let replicates = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };

    let beta0 = gen.truth.beta0;
    let mut summaries = Vec::with_capacity(cfg.n_grid.len());
    for (g, &n) in cfg.n_grid.iter().enumerate() {
        let reps = &replicates[g * cfg.replicates..(g + 1) * cfg.replicates];
        let s = Summary::from_replicates(n, beta0, reps);
        if s.failure_rate > MAX_FAILURE_RATE {
            let first = reps.iter().find_map(|r| r.error.clone()).unwrap_or_default();
            return Err(Error::numerical(format!(
                "{} of {} replicates failed at n = {n} (first error: {first})",
                s.failures, s.replicates
            )));
        }
        summaries.push(s);
    }
    Ok(MonteCarloResult {
        scenario: cfg.scenario,
        method: estimator.method,
        beta0,
        validity_guaranteed: cfg.scenario.validity_guaranteed(),
        replicates,
        summaries,
    })
}
