//! High-dimensional sparse nuisance models.
//!
//! The exposure model `alpha` solves a Dantzig-type moment constraint
//!
//! ```text
//! || n^-1 sum w_i (1 - Y_i) e^{r~(X_i)} (A_i - g(X_i'alpha)) X_i ||_inf <= lambda_alpha
//! ```
//!
//! and `(beta, gamma)` solve the coupled pair
//!
//! ```text
//! || n^-1 sum w_i {Y_i e^{-beta A_i} - (1 - Y_i) e^{X_i'gamma}} g'(X_i'alpha) X_i ||_inf <= lambda_gamma
//!    n^-1 sum w_i {Y_i e^{-beta A_i} - (1 - Y_i) e^{X_i'gamma}} (A_i - g(X_i'alpha))  = 0.
//! ```
//!
//! Each constraint is the stationarity condition of an ℓ1-penalized convex
//! objective, so the fits below solve those objectives and then verify the
//! constraints directly. Penalties are scaled by column standard deviations,
//! which is the same as standardizing `X` while reporting coefficients on the
//! original scale.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NuisancePredictions};
use crate::efficiency::{build_weights, ConditionalLaw, PhiKind, PhiSpec};
use crate::error::{Error, Result};
use crate::estimating::{sandwich_se, solve_beta, BracketConfig};
use crate::folds::make_folds;
use crate::link::LinkFunction;
use crate::lowdim::in_sample_weights;
use crate::math::{clamp_r, exp_saturating, expit, softplus};
use crate::penalized::{Problem, SolverOptions};
use crate::report::{EstimateReport, Method};
use crate::seed::{derive_seed, tag};

/// Largest admissible excess of a moment over its bound.
pub const FEASIBILITY_SLACK: f64 = 1e-6;

/// Sparse coefficient vector with a separate (unpenalized) intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCoef {
    dim: usize,
    pub intercept: f64,
    entries: BTreeMap<usize, f64>,
}

impl SparseCoef {
    pub fn zeros(dim: usize) -> Self {
        SparseCoef {
            dim,
            intercept: 0.0,
            entries: BTreeMap::new(),
        }
    }

    pub fn from_dense(intercept: f64, coef: &[f64]) -> Result<Self> {
        if coef.iter().any(|v| !v.is_finite()) || !intercept.is_finite() {
            return Err(Error::numerical("non-finite coefficient"));
        }
        Ok(SparseCoef {
            dim: coef.len(),
            intercept,
            entries: coef
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(j, v)| (j, *v))
                .collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of nonzero slopes.
    pub fn s_hat(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, j: usize) -> f64 {
        self.entries.get(&j).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().map(|(&j, &v)| (j, v))
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for (j, c) in self.iter() {
            v[j] = c;
        }
        v
    }

    /// ℓ1 norm of the slopes (intercept excluded).
    pub fn l1_norm(&self) -> f64 {
        self.entries.values().map(|v| v.abs()).sum()
    }

    /// `intercept + x_i' coef` for every row.
    pub fn eval_all(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let mut out = vec![self.intercept; x.nrows()];
        for (j, c) in self.iter() {
            for (o, v) in out.iter_mut().zip(x.column(j).iter()) {
                *o += c * v;
            }
        }
        out
    }

    pub fn eval_row(&self, row: &[f64]) -> f64 {
        self.intercept + self.iter().map(|(j, c)| c * row[j]).sum::<f64>()
    }

    /// `||self - other||_1` over slopes and intercept.
    pub fn l1_distance(&self, other: &SparseCoef) -> f64 {
        let d = (self.intercept - other.intercept).abs();
        let keys: BTreeSet<usize> =
            self.entries.keys().chain(other.entries.keys()).copied().collect();
        d + keys.iter().map(|&j| (self.get(j) - other.get(j)).abs()).sum::<f64>()
    }
}

/// Penalty level: an explicit value or `auto_constant * sqrt(log p / n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(untagged)]
pub enum Lambda {
    #[default]
    #[serde(with = "auto_tag")]
    Auto,
    Value(f64),
}

mod auto_tag {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("auto")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "auto" {
            Ok(())
        } else {
            Err(D::Error::custom(format!("expected \"auto\" or a number, got \"{s}\"")))
        }
    }
}

impl Lambda {
    pub fn resolve(self, auto_constant: f64, n: usize, p: usize) -> Result<f64> {
        let v = match self {
            Lambda::Auto => auto_constant * ((p.max(2) as f64).ln() / n as f64).sqrt(),
            Lambda::Value(v) => v,
        };
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid(format!("penalty level must be positive, got {v}")));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HdConfig {
    pub lambda_alpha: Lambda,
    pub lambda_gamma: Lambda,
    pub lambda_init: Lambda,
    pub auto_constant: f64,
    pub max_outer: usize,
    pub tol_outer: f64,
    pub intercept: bool,
    /// Scale penalties by column standard deviations.
    pub standardize: bool,
    /// Folds used to cross-fit efficiency weights.
    pub weight_folds: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for HdConfig {
    fn default() -> Self {
        HdConfig {
            lambda_alpha: Lambda::Auto,
            lambda_gamma: Lambda::Auto,
            lambda_init: Lambda::Auto,
            auto_constant: 1.0,
            max_outer: 50,
            tol_outer: 1e-7,
            intercept: true,
            standardize: true,
            weight_folds: 5,
            level: 0.95,
            seed: 0,
        }
    }
}

impl HdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.auto_constant.is_finite() && self.auto_constant > 0.0) {
            return Err(Error::invalid("auto_constant must be positive"));
        }
        if self.max_outer == 0 || !(self.tol_outer > 0.0) {
            return Err(Error::invalid("max_outer and tol_outer must be positive"));
        }
        if self.weight_folds < 2 {
            return Err(Error::invalid("weight_folds must be at least 2"));
        }
        for (name, l) in [
            ("lambda_alpha", self.lambda_alpha),
            ("lambda_gamma", self.lambda_gamma),
            ("lambda_init", self.lambda_init),
        ] {
            if let Lambda::Value(v) = l {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::invalid(format!("{name} must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }
}

/// Design `[1?, lead?, X]` plus the per-column penalty scale.
struct HdDesign {
    z: DMatrix<f64>,
    /// Penalty multiplier per column (0 for unpenalized).
    scale: Vec<f64>,
}

fn column_scales(x: &DMatrix<f64>, standardize: bool) -> Vec<f64> {
    let n = x.nrows() as f64;
    (0..x.ncols())
        .map(|j| {
            if !standardize {
                return 1.0;
            }
            let col = x.column(j);
            let mean = col.sum() / n;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect()
}

impl HdDesign {
    fn build(x: &DMatrix<f64>, rows: Option<&[usize]>, lead: Option<&[f64]>, cfg: &HdConfig) -> Self {
        let scales = column_scales(x, cfg.standardize);
        let offset = cfg.intercept as usize + lead.is_some() as usize;
        let all: Vec<usize>;
        let rows = match rows {
            Some(r) => r,
            None => {
                all = (0..x.nrows()).collect();
                &all
            }
        };
        let mut z = DMatrix::zeros(rows.len(), x.ncols() + offset);
        if cfg.intercept {
            z.column_mut(0).fill(1.0);
        }
        if let Some(l) = lead {
            let c = cfg.intercept as usize;
            for (r, &i) in rows.iter().enumerate() {
                z[(r, c)] = l[i];
            }
        }
        for j in 0..x.ncols() {
            let src = x.column(j);
            let mut dst = z.column_mut(j + offset);
            for (r, &i) in rows.iter().enumerate() {
                dst[r] = src[i];
            }
        }
        let mut scale = vec![0.0; offset];
        scale.extend(scales);
        HdDesign { z, scale }
    }

    fn penalty(&self, lambda: f64) -> Vec<f64> {
        self.scale.iter().map(|s| s * lambda).collect()
    }

    fn offset(&self) -> usize {
        self.z.ncols() - self.scale.iter().filter(|&&s| s > 0.0).count()
    }

    fn to_coef(&self, theta: &DVector<f64>, intercept: bool) -> Result<SparseCoef> {
        let off = self.offset();
        let slopes: Vec<f64> = theta.iter().skip(off).copied().collect();
        SparseCoef::from_dense(if intercept { theta[0] } else { 0.0 }, &slopes)
    }
}

/// `max_j (|moment_j| - bound_j)` with the moment given as the negative gradient.
fn slack(gradient: &DVector<f64>, penalty: &[f64]) -> f64 {
    gradient
        .iter()
        .zip(penalty)
        .map(|(g, p)| g.abs() - p)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Automatic levels for the weighted moment problems are multiplied by the
/// mean row weight, so that rescaling all weights leaves the fit unchanged.
fn resolve_weighted(lambda: Lambda, cfg: &HdConfig, data: &Dataset, weight_sum: f64) -> Result<f64> {
    let base = lambda.resolve(cfg.auto_constant, data.n(), data.p())?;
    match lambda {
        Lambda::Value(_) => Ok(base),
        Lambda::Auto => {
            let scale = weight_sum / data.n() as f64;
            if !(scale.is_finite() && scale > 0.0) {
                return Err(Error::numerical("moment weights vanish"));
            }
            Ok(base * scale)
        }
    }
}

fn solver_options() -> SolverOptions {
    SolverOptions {
        kkt_tol: 1e-9,
        ..SolverOptions::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialFit {
    pub beta_tilde: f64,
    pub gamma_tilde: SparseCoef,
    pub lambda: f64,
    pub iterations: usize,
    pub kkt: f64,
}

/// ℓ1-penalized logistic regression of `Y` on `(A, X)` with `A` unpenalized.
pub fn fit_gamma_initial(data: &Dataset, lambda_init: Lambda, cfg: &HdConfig) -> Result<InitialFit> {
    cfg.validate()?;
    if data.n() < 10 {
        return Err(Error::invalid("need at least 10 observations"));
    }
    let lambda = lambda_init.resolve(cfg.auto_constant, data.n(), data.p())?;
    let d = HdDesign::build(data.x(), None, Some(data.a()), cfg);
    let y = data.y();
    let loss = |i: usize, e: f64| {
        let pr = expit(e);
        (softplus(e) - y[i] * e, pr - y[i], pr * (1.0 - pr))
    };
    let prob = Problem::new(&d.z, loss, data.n() as f64, d.penalty(lambda))?;
    let sol = prob.solve(DVector::zeros(d.z.ncols()), &solver_options())?;
    if sol.kkt > FEASIBILITY_SLACK {
        return Err(Error::numerical(format!("KKT violation {:.2e} in initial fit", sol.kkt)));
    }
    Ok(InitialFit {
        beta_tilde: sol.theta[cfg.intercept as usize],
        gamma_tilde: d.to_coef(&sol.theta, cfg.intercept)?,
        lambda,
        iterations: sol.gradient_iters + sol.newton_iters,
        kkt: sol.kkt,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DantzigFit {
    pub alpha: SparseCoef,
    pub lambda: f64,
    /// `max_j (|moment_j| - lambda s_j)`; non-positive up to solver precision.
    pub slack: f64,
    pub iterations: usize,
}

/// Solves the Dantzig moment equation for the exposure model among controls.
pub fn fit_alpha_dantzig(
    data: &Dataset,
    gamma_tilde: &SparseCoef,
    link: LinkFunction,
    lambda_alpha: Lambda,
    weights: Option<&[f64]>,
    cfg: &HdConfig,
) -> Result<DantzigFit> {
    cfg.validate()?;
    check_weights(weights, data.n())?;
    let controls: Vec<usize> = (0..data.n()).filter(|&i| data.y()[i] == 0.0).collect();
    let d = HdDesign::build(data.x(), Some(&controls), None, cfg);
    let r_tilde = gamma_tilde.eval_all(data.x());
    let c: Vec<f64> = controls
        .iter()
        .map(|&i| weights.map_or(1.0, |w| w[i]) * exp_saturating(clamp_r(r_tilde[i]).0).0)
        .collect();
    let lambda = resolve_weighted(lambda_alpha, cfg, data, c.iter().sum::<f64>())?;
    let a: Vec<f64> = controls.iter().map(|&i| data.a()[i]).collect();
    let loss = |i: usize, e: f64| {
        (
            c[i] * (link.antiderivative(e) - a[i] * e),
            c[i] * (link.g(e) - a[i]),
            c[i] * link.g_prime(e),
        )
    };
    let penalty = d.penalty(lambda);
    let prob = Problem::new(&d.z, loss, data.n() as f64, penalty.clone())?;
    let sol = prob.solve(DVector::zeros(d.z.ncols()), &solver_options())?;
    let grad = prob.gradient(&prob.eta(&sol.theta));
    let s = slack(&grad, &penalty);
    if !(s <= FEASIBILITY_SLACK) {
        return Err(Error::numerical(format!("KKT violation: Dantzig slack {s:.2e}")));
    }
    Ok(DantzigFit {
        alpha: d.to_coef(&sol.theta, cfg.intercept)?,
        lambda,
        slack: s,
        iterations: sol.gradient_iters + sol.newton_iters,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointFit {
    pub beta_hat: f64,
    pub gamma_hat: SparseCoef,
    pub lambda: f64,
    /// Excess of the gamma moment over its bound at the returned `(beta, gamma)`.
    pub slack: f64,
    /// Value of the scalar equation at the returned `(beta, gamma)`.
    pub equation_residual: f64,
    pub sweeps: usize,
    pub root_converged: bool,
}

fn check_weights(weights: Option<&[f64]>, n: usize) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::invalid("weights length differs from sample size"));
        }
        if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("weights must be positive"));
        }
    }
    Ok(())
}

/// Alternates a penalized gamma step at fixed `beta` with a scalar root solve
/// for `beta` at fixed `gamma` until both conditions hold simultaneously.
pub fn fit_gamma_beta_joint(
    data: &Dataset,
    alpha_hat: &SparseCoef,
    link: LinkFunction,
    lambda_gamma: Lambda,
    beta_init: f64,
    cfg: &HdConfig,
    weights: Option<&[f64]>,
) -> Result<JointFit> {
    cfg.validate()?;
    check_weights(weights, data.n())?;
    let n = data.n();
    let d = HdDesign::build(data.x(), None, None, cfg);
    let eta_alpha = alpha_hat.eval_all(data.x());
    let m_hat: Vec<f64> = eta_alpha.iter().map(|&e| link.g(e)).collect();
    let w: Vec<f64> = weights.map_or_else(|| vec![1.0; n], |w| w.to_vec());
    let dw: Vec<f64> = (0..n).map(|i| w[i] * link.g_prime(eta_alpha[i])).collect();
    let lambda = resolve_weighted(lambda_gamma, cfg, data, dw.iter().sum::<f64>())?;
    let penalty = d.penalty(lambda);
    let (y, a) = (data.y(), data.a());
    let bracket = BracketConfig::default();

    let mut beta = beta_init;
    let mut theta = DVector::zeros(d.z.ncols());
    let mut last_gamma = SparseCoef::zeros(data.p());
    for sweep in 1..=cfg.max_outer {
        let treated: Vec<f64> = (0..n)
            .map(|i| if y[i] == 1.0 { exp_saturating(-beta * a[i]).0 } else { 0.0 })
            .collect();
        let loss = |i: usize, e: f64| {
            let ctrl = (1.0 - y[i]) * exp_saturating(e).0;
            (
                dw[i] * (ctrl - treated[i] * e),
                dw[i] * (ctrl - treated[i]),
                dw[i] * ctrl,
            )
        };
        let prob = Problem::new(&d.z, loss, n as f64, penalty.clone())?;
        theta = prob.solve(theta, &solver_options())?.theta;
        let gamma = d.to_coef(&theta, cfg.intercept)?;

        let r = gamma.eval_all(data.x());
        let preds = NuisancePredictions::new(r, m_hat.clone())?.with_weights(w.clone())?;
        let root = solve_beta(data, &preds, &bracket)?;
        let delta = (root.beta_hat - beta).abs() + gamma.l1_distance(&last_gamma);
        beta = root.beta_hat;
        last_gamma = gamma;

        if delta <= cfg.tol_outer {
            let s = joint_gamma_slack(data, &last_gamma, beta, &dw, &penalty, &d);
            if s <= FEASIBILITY_SLACK {
                return Ok(JointFit {
                    beta_hat: beta,
                    gamma_hat: last_gamma,
                    lambda,
                    slack: s,
                    equation_residual: root.residual,
                    sweeps: sweep,
                    root_converged: root.converged,
                });
            }
        }
    }
    Err(Error::JointNotConverged {
        sweeps: cfg.max_outer,
        beta,
        gamma: Box::new(last_gamma),
    })
}

fn joint_gamma_slack(
    data: &Dataset,
    gamma: &SparseCoef,
    beta: f64,
    dw: &[f64],
    penalty: &[f64],
    d: &HdDesign,
) -> f64 {
    let r = gamma.eval_all(data.x());
    let (y, a) = (data.y(), data.a());
    let v = DVector::from_iterator(
        data.n(),
        (0..data.n()).map(|i| {
            let lead = if y[i] == 1.0 {
                exp_saturating(-beta * a[i]).0
            } else {
                -exp_saturating(r[i]).0
            };
            dw[i] * lead
        }),
    );
    let moment = d.z.tr_mul(&v) / data.n() as f64;
    slack(&moment, penalty)
}

/// Sandwich standard error of `beta` from the stacked estimating equations of
/// `beta`, the gamma moment and the alpha moment, each nuisance restricted to
/// its selected support (plus intercept). Weights are held fixed.
#[allow(clippy::too_many_arguments)]
pub fn stacked_se(
    data: &Dataset,
    link: LinkFunction,
    beta: f64,
    gamma_tilde: &SparseCoef,
    alpha: &SparseCoef,
    gamma: &SparseCoef,
    weights: Option<&[f64]>,
    intercept: bool,
) -> Result<f64> {
    let (y, a, x) = (data.y(), data.a(), data.x());
    let n = data.n();
    let mut cols_g: Vec<Option<usize>> = gamma.iter().map(|(j, _)| Some(j)).collect();
    let mut cols_a: Vec<Option<usize>> = alpha.iter().map(|(j, _)| Some(j)).collect();
    if intercept {
        cols_g.insert(0, None);
        cols_a.insert(0, None);
    }
    let (dg, da) = (cols_g.len(), cols_a.len());
    let dim = 1 + dg + da;
    let zval = |i: usize, c: Option<usize>| c.map_or(1.0, |j| x[(i, j)]);
    let r_tilde = gamma_tilde.eval_all(x);
    let eta_a = alpha.eval_all(x);
    let r = gamma.eval_all(x);

    let mut jac = DMatrix::<f64>::zeros(dim, dim);
    let mut meat = DMatrix::<f64>::zeros(dim, dim);
    let mut psi = DVector::<f64>::zeros(dim);
    let mut zg = vec![0.0; dg];
    let mut za = vec![0.0; da];
    for i in 0..n {
        let w = weights.map_or(1.0, |w| w[i]);
        let (m, g1, g2) = (link.g(eta_a[i]), link.g_prime(eta_a[i]), link.g_second(eta_a[i]));
        let et = y[i] * exp_saturating(-beta * a[i]).0;
        let ec = (1.0 - y[i]) * exp_saturating(r[i]).0;
        let lead = et - ec;
        let ea = (1.0 - y[i]) * exp_saturating(clamp_r(r_tilde[i]).0).0;
        for (k, &c) in cols_g.iter().enumerate() {
            zg[k] = zval(i, c);
        }
        for (k, &c) in cols_a.iter().enumerate() {
            za[k] = zval(i, c);
        }
        psi[0] = w * lead * (a[i] - m);
        for k in 0..dg {
            psi[1 + k] = w * lead * g1 * zg[k];
        }
        for k in 0..da {
            psi[1 + dg + k] = w * ea * (a[i] - m) * za[k];
        }
        meat.ger(1.0, &psi, &psi, 1.0);

        // Row beta.
        jac[(0, 0)] -= w * a[i] * et * (a[i] - m);
        for k in 0..dg {
            jac[(0, 1 + k)] -= w * ec * (a[i] - m) * zg[k];
        }
        for k in 0..da {
            jac[(0, 1 + dg + k)] -= w * lead * g1 * za[k];
        }
        // Rows gamma.
        for k in 0..dg {
            jac[(1 + k, 0)] -= w * a[i] * et * g1 * zg[k];
            for l in 0..dg {
                jac[(1 + k, 1 + l)] -= w * ec * g1 * zg[k] * zg[l];
            }
            for l in 0..da {
                jac[(1 + k, 1 + dg + l)] += w * lead * g2 * zg[k] * za[l];
            }
        }
        // Rows alpha.
        for k in 0..da {
            for l in 0..da {
                jac[(1 + dg + k, 1 + dg + l)] -= w * ea * g1 * za[k] * za[l];
            }
        }
    }
    let nf = n as f64;
    jac /= nf;
    meat /= nf;
    let inv = jac
        .try_inverse()
        .ok_or_else(|| Error::numerical("singular stacked Jacobian"))?;
    let row = inv.row(0);
    let v = (row * &meat * row.transpose())[(0, 0)];
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::numerical("degenerate stacked variance"));
    }
    Ok((v / nf).sqrt())
}

/// Maximum-norm feasibility of both moment conditions, recomputed from scratch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feasibility {
    pub alpha_slack: f64,
    pub gamma_slack: f64,
    pub equation_residual: f64,
}

/// Re-evaluates the alpha and gamma moment constraints at the given estimates.
#[allow(clippy::too_many_arguments)]
pub fn check_feasibility(
    data: &Dataset,
    gamma_tilde: &SparseCoef,
    alpha: &SparseCoef,
    gamma: &SparseCoef,
    beta: f64,
    link: LinkFunction,
    lambda_alpha: f64,
    lambda_gamma: f64,
    weights: Option<&[f64]>,
    cfg: &HdConfig,
) -> Feasibility {
    let n = data.n();
    let nf = n as f64;
    let scales = column_scales(data.x(), cfg.standardize);
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let (y, a, x) = (data.y(), data.a(), data.x());
    let r_tilde = gamma_tilde.eval_all(x);
    let eta_a = alpha.eval_all(x);
    let r = gamma.eval_all(x);

    let mut alpha_moment = vec![0.0; data.p()];
    let mut alpha_icpt = 0.0;
    let mut gamma_moment = vec![0.0; data.p()];
    let mut gamma_icpt = 0.0;
    let mut eq = 0.0;
    for i in 0..n {
        let ca = w(i) * (1.0 - y[i]) * exp_saturating(clamp_r(r_tilde[i]).0).0 * (a[i] - link.g(eta_a[i]));
        let lead = y[i] * exp_saturating(-beta * a[i]).0 - (1.0 - y[i]) * exp_saturating(r[i]).0;
        let cg = w(i) * lead * link.g_prime(eta_a[i]);
        alpha_icpt += ca;
        gamma_icpt += cg;
        for j in 0..data.p() {
            alpha_moment[j] += ca * x[(i, j)];
            gamma_moment[j] += cg * x[(i, j)];
        }
        eq += w(i) * lead * (a[i] - link.g(eta_a[i]));
    }
    let excess = |m: &[f64], icpt: f64, lambda: f64| {
        let mut s = if cfg.intercept { (icpt / nf).abs() } else { f64::NEG_INFINITY };
        for j in 0..m.len() {
            s = s.max((m[j] / nf).abs() - lambda * scales[j]);
        }
        s
    };
    Feasibility {
        alpha_slack: excess(&alpha_moment, alpha_icpt, lambda_alpha),
        gamma_slack: excess(&gamma_moment, gamma_icpt, lambda_gamma),
        equation_residual: eq / nf,
    }
}

/// Cross-fitted efficiency weights from the initial and Dantzig fits.
fn crossfit_weights(data: &Dataset, link: LinkFunction, cfg: &HdConfig, phi: PhiKind) -> Result<Vec<f64>> {
    let n = data.n();
    let plan = make_folds(n, cfg.weight_folds, derive_seed(cfg.seed, &[tag::WEIGHT_FOLDS]))?;
    let mut r_oof = vec![0.0; n];
    let mut m_oof = vec![0.0; n];
    let mut laws = Vec::with_capacity(plan.k());
    for k in 1..=plan.k() {
        let train = plan.training(k);
        let sub = data.select(&train).map_err(|e| e.in_fold(k))?;
        let init = fit_gamma_initial(&sub, cfg.lambda_init, cfg).map_err(|e| e.in_fold(k))?;
        let dz = fit_alpha_dantzig(&sub, &init.gamma_tilde, link, cfg.lambda_alpha, None, cfg)
            .map_err(|e| e.in_fold(k))?;
        let m_train: Vec<f64> = dz.alpha.eval_all(sub.x()).iter().map(|&e| link.g(e)).collect();
        let rows: Vec<usize> = (0..sub.n()).collect();
        laws.push(ConditionalLaw::detect(sub.y(), sub.a(), &m_train, &rows));
        for i in plan.held_out(k) {
            let row = data.x_row(i);
            r_oof[i] = clamp_r(init.gamma_tilde.eval_row(&row)).0;
            m_oof[i] = link.g(dz.alpha.eval_row(&row));
        }
    }
    let spec = match phi {
        PhiKind::None => return Ok(vec![1.0; n]),
        PhiKind::Simp => PhiSpec::simp(),
        PhiKind::Opt => {
            let simp = build_weights(&plan, &r_oof, &m_oof, &PhiSpec::simp(), &laws)?;
            let preds = NuisancePredictions::new(r_oof.clone(), m_oof.clone())?.with_weights(simp)?;
            let pilot = solve_beta(data, &preds, &BracketConfig::default())?;
            PhiSpec::opt(pilot.beta_hat)
        }
    };
    build_weights(&plan, &r_oof, &m_oof, &spec, &laws)
}

/// Full high-dimensional pipeline: initial fit, Dantzig exposure model, joint
/// `(beta, gamma)` fit, sandwich standard error.
pub fn estimate_hd(
    data: &Dataset,
    link: LinkFunction,
    cfg: &HdConfig,
    phi: PhiKind,
    cross_fit_weights: bool,
) -> Result<EstimateReport> {
    cfg.validate()?;
    let init = fit_gamma_initial(data, cfg.lambda_init, cfg)?;
    let weights = match phi {
        PhiKind::None => None,
        _ if cross_fit_weights => Some(crossfit_weights(data, link, cfg, phi)?),
        _ => {
            let dz = fit_alpha_dantzig(data, &init.gamma_tilde, link, cfg.lambda_alpha, None, cfg)?;
            let r: Vec<f64> = init.gamma_tilde.eval_all(data.x()).into_iter().map(|v| clamp_r(v).0).collect();
            let m: Vec<f64> = dz.alpha.eval_all(data.x()).iter().map(|&e| link.g(e)).collect();
            let pilot = if phi == PhiKind::Opt {
                let w = in_sample_weights(data, &r, &m, PhiKind::Simp, 0.0)?;
                let preds = NuisancePredictions::new(r.clone(), m.clone())?.with_weights(w)?;
                solve_beta(data, &preds, &BracketConfig::default())?.beta_hat
            } else {
                0.0
            };
            Some(in_sample_weights(data, &r, &m, phi, pilot)?)
        }
    };
    let w = weights.as_deref();
    let dz = fit_alpha_dantzig(data, &init.gamma_tilde, link, cfg.lambda_alpha, w, cfg)?;
    let joint = fit_gamma_beta_joint(data, &dz.alpha, link, cfg.lambda_gamma, init.beta_tilde, cfg, w)?;

    let r = joint.gamma_hat.eval_all(data.x());
    let m: Vec<f64> = dz.alpha.eval_all(data.x()).iter().map(|&e| link.g(e)).collect();
    let mut preds = NuisancePredictions::new(r, m)?;
    if let Some(w) = &weights {
        preds = preds.with_weights(w.clone())?;
    }
    let se_fixed = sandwich_se(data, &preds, joint.beta_hat)?;
    let se = stacked_se(
        data,
        link,
        joint.beta_hat,
        &init.gamma_tilde,
        &dz.alpha,
        &joint.gamma_hat,
        weights.as_deref(),
        cfg.intercept,
    )?;

    let mut diag = BTreeMap::new();
    diag.insert("lambda_init".to_string(), init.lambda);
    diag.insert("lambda_alpha".to_string(), dz.lambda);
    diag.insert("lambda_gamma".to_string(), joint.lambda);
    diag.insert("beta_tilde".to_string(), init.beta_tilde);
    diag.insert("support_gamma_tilde".to_string(), init.gamma_tilde.s_hat() as f64);
    diag.insert("support_alpha".to_string(), dz.alpha.s_hat() as f64);
    diag.insert("support_gamma".to_string(), joint.gamma_hat.s_hat() as f64);
    let feas = check_feasibility(
        data,
        &init.gamma_tilde,
        &dz.alpha,
        &joint.gamma_hat,
        joint.beta_hat,
        link,
        dz.lambda,
        joint.lambda,
        w,
        cfg,
    );
    diag.insert("feasibility_slack_alpha".to_string(), feas.alpha_slack);
    diag.insert("feasibility_slack_gamma".to_string(), feas.gamma_slack);
    diag.insert("equation_residual".to_string(), feas.equation_residual);
    diag.insert("outer_sweeps".to_string(), joint.sweeps as f64);
    diag.insert("r_clipped".to_string(), preds.r_clipped() as f64);
    diag.insert("se_nuisance_fixed".to_string(), se_fixed);
    EstimateReport::new(joint.beta_hat, se, cfg.level, Method::HdSparse, joint.root_converged, diag)
}
