//! Fixed-dimensional parametric nuisance models.
//!
//! `r(x) = x'gamma` comes from the logistic MLE of `Y` on `(A, X)`; the exposure
//! mean among controls `m(x) = g(x'alpha)` comes from the moment equation
//! `sum_{Y=0} (A - g(x'alpha)) x = 0`. The estimate then solves the (optionally
//! weighted) doubly robust equation with these plug-ins.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NuisancePredictions};
use crate::efficiency::{ConditionalLaw, PhiKind, PhiOpt, WEIGHT_MAX, WEIGHT_MIN};
use crate::error::{Error, Result};
use crate::estimating::{dh_dbeta, eval_h, sandwich_se, solve_beta, BracketConfig};
use crate::link::LinkFunction;
use crate::math::{exp_saturating, expit, softplus, R_CLIP};
use crate::penalized::{Problem, SolverOptions};
use crate::report::{EstimateReport, Method};

/// Affine index `intercept + x'coef`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearIndex {
    pub intercept: f64,
    pub coef: DVector<f64>,
}

impl LinearIndex {
    pub fn eval_all(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let v = x * &self.coef;
        v.iter().map(|e| e + self.intercept).collect()
    }

    pub fn eval_row(&self, row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(self.coef.iter()).map(|(a, b)| a * b).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaFit {
    /// Coefficient on the exposure.
    pub beta_init: f64,
    pub gamma: LinearIndex,
    pub iterations: usize,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaFit {
    pub alpha: LinearIndex,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// How the standard error accounts for the fitted nuisance parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    /// Stacked M-estimation sandwich including the nuisance estimating equations.
    #[default]
    Stacked,
    /// Nuisance values treated as known.
    NuisanceFixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowdimOptions {
    pub intercept: bool,
    pub level: f64,
    pub bracket: BracketConfig,
    pub variance: VarianceKind,
}

impl Default for LowdimOptions {
    fn default() -> Self {
        LowdimOptions {
            intercept: true,
            level: 0.95,
            bracket: BracketConfig::default(),
            variance: VarianceKind::Stacked,
        }
    }
}

const GRADIENT_TOL: f64 = 1e-8;

/// `[1?, lead?, X]` for the given rows.
fn design(x: &DMatrix<f64>, rows: &[usize], lead: Option<&[f64]>, intercept: bool) -> DMatrix<f64> {
    let offset = intercept as usize + lead.is_some() as usize;
    DMatrix::from_fn(rows.len(), x.ncols() + offset, |r, c| {
        let i = rows[r];
        match (intercept, lead, c) {
            (true, _, 0) => 1.0,
            (true, Some(l), 1) | (false, Some(l), 0) => l[i],
            _ => x[(i, c - offset)],
        }
    })
}

fn check_full_rank(z: &DMatrix<f64>, what: &str) -> Result<()> {
    let sv = z.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= 1e-10 * max {
        return Err(Error::invalid(format!("{what} design is rank deficient")));
    }
    Ok(())
}

fn split_index(theta: &DVector<f64>, intercept: bool, skip: usize) -> LinearIndex {
    let start = intercept as usize + skip;
    LinearIndex {
        intercept: if intercept { theta[0] } else { 0.0 },
        coef: theta.rows(start, theta.len() - start).into_owned(),
    }
}

/// Logistic maximum likelihood of `Y` on `(A, X)` by damped Newton.
pub fn fit_gamma_mle(data: &Dataset, intercept: bool) -> Result<GammaFit> {
    let (n, p) = (data.n(), data.p());
    if 5 * p >= n {
        return Err(Error::invalid(format!("p = {p} too large for n = {n} (need p < n/5)")));
    }
    let rows: Vec<usize> = (0..n).collect();
    let z = design(data.x(), &rows, Some(data.a()), intercept);
    check_full_rank(&z, "logistic")?;
    let y = data.y();
    let loss = |i: usize, e: f64| {
        let pr = expit(e);
        (softplus(e) - y[i] * e, pr - y[i], pr * (1.0 - pr))
    };
    let prob = Problem::new(&z, loss, n as f64, vec![0.0; z.ncols()])?;
    let opts = SolverOptions {
        kkt_tol: GRADIENT_TOL * 1e-2,
        ..SolverOptions::default()
    };
    let sol = prob.solve(DVector::zeros(z.ncols()), &opts)?;
    let max_eta = prob.eta(&sol.theta).amax();
    if max_eta > R_CLIP {
        return Err(Error::numerical(format!(
            "quasi-separation: |linear predictor| reaches {max_eta:.1}"
        )));
    }
    if sol.kkt > GRADIENT_TOL {
        return Err(Error::NoConvergence(format!(
            "logistic MLE gradient {:.2e} after {} Newton steps",
            sol.kkt, sol.newton_iters
        )));
    }
    Ok(GammaFit {
        beta_init: sol.theta[intercept as usize],
        gamma: split_index(&sol.theta, intercept, 1),
        iterations: sol.newton_iters,
        gradient_norm: sol.kkt,
    })
}

/// Solves `sum_{Y=0} (A_i - g(x_i'alpha)) x_i = 0` by Newton on `sum G(x'alpha) - A x'alpha`.
pub fn fit_alpha_glm(data: &Dataset, link: LinkFunction, intercept: bool) -> Result<AlphaFit> {
    let controls: Vec<usize> = (0..data.n()).filter(|&i| data.y()[i] == 0.0).collect();
    let p = data.p();
    if controls.len() < 5 * p {
        return Err(Error::invalid(format!(
            "{} control rows for p = {p} (need at least 5p)",
            controls.len()
        )));
    }
    let z = design(data.x(), &controls, None, intercept);
    check_full_rank(&z, "exposure model")?;
    let a: Vec<f64> = controls.iter().map(|&i| data.a()[i]).collect();
    let loss = |i: usize, e: f64| {
        (
            link.antiderivative(e) - a[i] * e,
            link.g(e) - a[i],
            link.g_prime(e),
        )
    };
    let prob = Problem::new(&z, loss, controls.len() as f64, vec![0.0; z.ncols()])?;
    let opts = SolverOptions {
        kkt_tol: GRADIENT_TOL * 1e-2,
        newton_max_iter: 100,
        ..SolverOptions::default()
    };
    let sol = prob.solve(DVector::zeros(z.ncols()), &opts)?;
    if !(sol.kkt <= GRADIENT_TOL) {
        return Err(Error::NoConvergence(format!(
            "exposure model gradient {:.2e} after {} Newton steps",
            sol.kkt, sol.newton_iters
        )));
    }
    Ok(AlphaFit {
        alpha: split_index(&sol.theta, intercept, 0),
        iterations: sol.newton_iters,
        gradient_norm: sol.kkt,
    })
}

/// Weights `phi(X) e^{-r(X)}` evaluated in-sample for the parametric fits.
pub(crate) fn in_sample_weights(
    data: &Dataset,
    r: &[f64],
    m: &[f64],
    phi: PhiKind,
    beta_pilot: f64,
) -> Result<Vec<f64>> {
    let clampw = |w: f64| w.clamp(WEIGHT_MIN, WEIGHT_MAX);
    match phi {
        PhiKind::None => Ok(vec![1.0; r.len()]),
        PhiKind::Simp => Ok(r.iter().map(|&ri| clampw(expit(-ri))).collect()),
        PhiKind::Opt => {
            let rows: Vec<usize> = (0..data.n()).collect();
            let law = ConditionalLaw::detect(data.y(), data.a(), m, &rows);
            let eval = PhiOpt::new(law, beta_pilot)?;
            r.iter()
                .zip(m)
                .map(|(&ri, &mi)| Ok(clampw(eval.eval(ri, mi)? * exp_saturating(-ri).0)))
                .collect()
        }
    }
}

/// Doubly robust estimate with parametric nuisance models.
pub fn estimate_lowdim(
    data: &Dataset,
    link: LinkFunction,
    phi: PhiKind,
    opts: &LowdimOptions,
) -> Result<EstimateReport> {
    let gamma = fit_gamma_mle(data, opts.intercept)?;
    let alpha = fit_alpha_glm(data, link, opts.intercept)?;
    let r = gamma.gamma.eval_all(data.x());
    let eta_m = alpha.alpha.eval_all(data.x());
    let m: Vec<f64> = eta_m.iter().map(|&e| link.g(e)).collect();

    let mut diagnostics = BTreeMap::new();
    let base = NuisancePredictions::new(r.clone(), m.clone())?;
    diagnostics.insert("r_clipped".into(), base.r_clipped() as f64);

    let beta_pilot = if phi == PhiKind::Opt {
        let w = in_sample_weights(data, base.r_hat(), &m, PhiKind::Simp, 0.0)?;
        let pilot = solve_beta(data, &base.clone().with_weights(w)?, &opts.bracket)?;
        diagnostics.insert("beta_pilot".into(), pilot.beta_hat);
        pilot.beta_hat
    } else {
        0.0
    };
    let w = in_sample_weights(data, base.r_hat(), &m, phi, beta_pilot)?;
    let preds = base.with_weights(w)?;
    let sol = solve_beta(data, &preds, &opts.bracket)?;

    let se_fixed = sandwich_se(data, &preds, sol.beta_hat)?;
    let se = match opts.variance {
        VarianceKind::NuisanceFixed => se_fixed,
        VarianceKind::Stacked => {
            let eta_logistic: Vec<f64> =
                r.iter().zip(data.a()).map(|(ri, ai)| ri + gamma.beta_init * ai).collect();
            stacked_se(data, &preds, sol.beta_hat, &eta_logistic, &eta_m, link, opts.intercept)?
        },
    };
    diagnostics.insert("root_iterations".into(), sol.iters as f64);
    diagnostics.insert("root_residual".into(), sol.residual);
    diagnostics.insert("exp_saturations".into(), sol.saturations as f64);
    diagnostics.insert("gamma_newton_iterations".into(), gamma.iterations as f64);
    diagnostics.insert("alpha_newton_iterations".into(), alpha.iterations as f64);
    diagnostics.insert("beta_init".into(), gamma.beta_init);
    diagnostics.insert("se_nuisance_fixed".into(), se_fixed);
    EstimateReport::new(sol.beta_hat, se, opts.level, Method::Lowdim, sol.converged, diagnostics)
}

/// Sandwich standard error from the stacked estimating equations of
/// `(gamma_full, alpha, beta)`; weights are held fixed.
fn stacked_se(
    data: &Dataset,
    preds: &NuisancePredictions,
    beta: f64,
    eta_logistic: &[f64],
    eta_m: &[f64],
    link: LinkFunction,
    intercept: bool,
) -> Result<f64> {
    let n = data.n();
    let nf = n as f64;
    let (y, a) = (data.y(), data.a());
    let (r, m, w) = (preds.r_hat(), preds.m_hat(), preds.w_hat());
    let rows: Vec<usize> = (0..n).collect();

    // Logistic block: theta = (c?, b, gamma), eta = c + b A + X gamma.
    let zg = design(data.x(), &rows, Some(a), intercept);
    // Exposure block: (c?, alpha) on X.
    let za = design(data.x(), &rows, None, intercept);
    let a_col = intercept as usize;

    let mut hg = DMatrix::zeros(zg.ncols(), zg.ncols());
    let mut ha = DMatrix::zeros(za.ncols(), za.ncols());
    let mut j_bg = DVector::zeros(zg.ncols());
    let mut j_ba = DVector::zeros(za.ncols());
    let mut j_bb = 0.0;
    for i in 0..n {
        let zgi = zg.row(i).transpose();
        let zai = za.row(i).transpose();
        let eta_g = eta_logistic[i];
        let pr = expit(eta_g);
        hg += &zgi * zgi.transpose() * (pr * (1.0 - pr));
        if y[i] == 0.0 {
            ha += &zai * zai.transpose() * link.g_prime(eta_m[i]);
        }
        let er = exp_saturating(r[i]).0;
        let lead = if y[i] == 1.0 { exp_saturating(-beta * a[i]).0 } else { -er };
        // d(w h)/dr = -w (1-Y) e^r (A - m), r depends on every coordinate except b.
        let dr = -w[i] * (1.0 - y[i]) * er * (a[i] - m[i]);
        for c in 0..zg.ncols() {
            if c != a_col {
                j_bg[c] += dr * zgi[c];
            }
        }
        // d(w h)/dm = -w lead, m = g(eta_m).
        j_ba += &zai * (-w[i] * lead * link.g_prime(eta_m[i]));
        j_bb += w[i] * dh_dbeta(y[i], a[i], beta, m[i]);
    }
    hg /= nf;
    ha /= nf;
    j_bg /= nf;
    j_ba /= nf;
    j_bb /= nf;
    if j_bb.abs() < crate::estimating::SCORE_DERIVATIVE_GUARD {
        return Err(Error::numerical("degenerate score derivative"));
    }
    let hg_inv = hg
        .cholesky()
        .ok_or_else(|| Error::numerical("singular logistic information"))?;
    let ha_inv = ha
        .cholesky()
        .ok_or_else(|| Error::numerical("singular exposure-model information"))?;
    // Row vectors J_bg H_g^{-1} and J_ba H_a^{-1}.
    let cg = hg_inv.solve(&j_bg);
    let ca = ha_inv.solve(&j_ba);

    let mut acc = 0.0;
    for i in 0..n {
        let zgi = zg.row(i).transpose();
        let zai = za.row(i).transpose();
        let eta_g = eta_logistic[i];
        // Scores of the mean negative log-likelihood / exposure objective.
        let sg = &zgi * (expit(eta_g) - y[i]);
        let sa = &zai * ((1.0 - y[i]) * (link.g(eta_m[i]) - a[i]));
        let psi = w[i] * eval_h(y[i], a[i], beta, r[i], m[i]);
        let infl = -(psi - cg.dot(&sg) - ca.dot(&sa)) / j_bb;
        acc += infl * infl;
    }
    Ok((acc / nf / nf).sqrt())
}
