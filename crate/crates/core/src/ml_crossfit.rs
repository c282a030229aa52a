//! Cross-fitted double machine learning with full-model refitting of `r`.
//!
//! For each outer fold `k` the nuisances are learned on the complement
//! `I_{-k}`:
//!
//! - `m` by regressing `A` on `X` among controls;
//! - a "full" model `M(A, X) = P(Y = 1 | A, X)` and `a(X) = E[A | X]` on inner
//!   folds of `I_{-k}`, giving `W = logit M` and `A - a(X)` out of inner fold;
//! - `beta_init = sum W (A - a) / sum (A - a)^2`;
//! - `r(x) = t(x) - beta_init * a(x)` where `t` regresses `W` on `X`, or the
//!   ratio variant below.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NuisancePredictions};
use crate::efficiency::{build_weights, ConditionalLaw, PhiKind, PhiSpec};
use crate::error::{Error, Result};
use crate::estimating::{sandwich_se, solve_beta, BracketConfig};
use crate::folds::{make_folds, FoldPlan};
use crate::learners::{Learner, Predictor};
use crate::math::{clamp_prob, clamp_r, exp_saturating, logit};
use crate::report::{EstimateReport, Method};
use crate::seed::{derive_seed, tag};

/// Smallest numerator value before the logarithm in the ratio refit.
pub const RATIO_NUMERATOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RVariant {
    #[default]
    TRefit,
    RatioRefit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefitConfig {
    pub k_outer: usize,
    pub k_inner: usize,
    pub r_variant: RVariant,
    pub prob_clip: f64,
    pub level: f64,
    pub seed: u64,
}

impl Default for RefitConfig {
    fn default() -> Self {
        RefitConfig {
            k_outer: 5,
            k_inner: 5,
            r_variant: RVariant::TRefit,
            prob_clip: 1e-6,
            level: 0.95,
            seed: 0,
        }
    }
}

impl RefitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_outer < 2 || self.k_inner < 2 {
            return Err(Error::invalid("k_outer and k_inner must be at least 2"));
        }
        if !(self.prob_clip > 0.0 && self.prob_clip < 0.1) {
            return Err(Error::invalid("prob_clip must lie in (0, 0.1)"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::invalid("level must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Exposure-model predictors, one per outer fold, each trained on the
/// controls outside that fold.
pub fn fit_m_hat(
    data: &Dataset,
    learner: &dyn Learner,
    plan: &FoldPlan,
    seed: u64,
) -> Result<Vec<Box<dyn Predictor>>> {
    (1..=plan.k())
        .map(|k| {
            let fold_seed = derive_seed(seed, &[tag::OUTER_FOLDS, k as u64]);
            fit_m_fold(data, learner, &plan.training(k), derive_seed(fold_seed, &[tag::LEARNER_M]))
                .map_err(|e| e.in_fold(k))
        })
        .collect()
}

fn fit_m_fold(data: &Dataset, learner: &dyn Learner, train: &[usize], seed: u64) -> Result<Box<dyn Predictor>> {
    let controls: Vec<usize> = train.iter().copied().filter(|&i| data.y()[i] == 0.0).collect();
    if controls.is_empty() {
        return Err(Error::invalid("no controls (Y = 0) in the training rows"));
    }
    learner.fit(data.a(), data.x(), &controls, seed)
}

/// Out-of-inner-fold quantities for one outer fold.
pub struct FullAndA {
    /// `logit M(A_i, X_i)` for each training row, in the order given.
    pub logit_m: Vec<f64>,
    /// `A_i - a(X_i)` for each training row.
    pub resid: Vec<f64>,
    /// One exposure-mean predictor per inner fold.
    pub a_hat: Vec<Box<dyn Predictor>>,
    /// Number of `M` predictions moved into `[prob_clip, 1 - prob_clip]`.
    pub clamped: usize,
}

/// Fits the full model `M(A, X)` and `a(X)` on the inner folds of `train`.
/// `inner` partitions positions `0..train.len()`.
pub fn fit_full_and_a(
    data: &Dataset,
    learner: &dyn Learner,
    train: &[usize],
    inner: &FoldPlan,
    prob_clip: f64,
    seed: u64,
) -> Result<FullAndA> {
    if inner.n() != train.len() {
        return Err(Error::invalid("inner fold plan does not match the training rows"));
    }
    let ax = data.ax_matrix();
    let mut logit_m = vec![0.0; train.len()];
    let mut resid = vec![0.0; train.len()];
    let mut a_hat = Vec::with_capacity(inner.k());
    let mut clamped = 0;
    for j in 1..=inner.k() {
        let fit_rows: Vec<usize> = inner.training(j).into_iter().map(|q| train[q]).collect();
        let held: Vec<usize> = inner.held_out(j);
        let held_rows: Vec<usize> = held.iter().map(|&q| train[q]).collect();
        let full = learner
            .fit(data.y(), &ax, &fit_rows, derive_seed(seed, &[tag::LEARNER_FULL, j as u64]))
            .map_err(|e| e.in_fold(j))?;
        let a_fit = learner
            .fit(data.a(), data.x(), &fit_rows, derive_seed(seed, &[tag::LEARNER_A, j as u64]))
            .map_err(|e| e.in_fold(j))?;
        let m_pred = full.predict_rows(&ax, &held_rows);
        let a_pred = a_fit.predict_rows(data.x(), &held_rows);
        for (t, &q) in held.iter().enumerate() {
            let (p, was) = clamp_prob(m_pred[t], prob_clip);
            clamped += was as usize;
            logit_m[q] = logit(p);
            resid[q] = data.a()[train[q]] - a_pred[t];
        }
        a_hat.push(a_fit);
    }
    Ok(FullAndA {
        logit_m,
        resid,
        a_hat,
        clamped,
    })
}

/// Least-squares slope of `logit_m` on the exposure residual (no intercept).
pub fn estimate_beta_init(logit_m: &[f64], resid: &[f64]) -> Result<f64> {
    if logit_m.len() != resid.len() {
        return Err(Error::invalid("length mismatch"));
    }
    let ss: f64 = resid.iter().map(|r| r * r).sum();
    if !(ss > 0.0) {
        return Err(Error::numerical("no exposure variation"));
    }
    Ok(logit_m.iter().zip(resid).map(|(w, r)| w * r).sum::<f64>() / ss)
}

/// `r(x) = t(x) - beta_init * mean_j a_j(x)`, clipped.
struct TRefitPredictor {
    t: Box<dyn Predictor>,
    a_hat: Vec<Box<dyn Predictor>>,
    beta_init: f64,
}

impl Predictor for TRefitPredictor {
    fn predict(&self, row: &[f64]) -> f64 {
        let a = self.a_hat.iter().map(|f| f.predict(row)).sum::<f64>() / self.a_hat.len() as f64;
        clamp_r(self.t.predict(row) - self.beta_init * a).0
    }
}

/// Refit of `r` through `t(x) = E[logit M(A, X) | X = x]`. `w` is aligned with
/// `train`.
pub fn refit_r_t(
    data: &Dataset,
    learner: &dyn Learner,
    train: &[usize],
    w: &[f64],
    beta_init: f64,
    a_hat: Vec<Box<dyn Predictor>>,
    seed: u64,
) -> Result<Box<dyn Predictor>> {
    if w.len() != train.len() {
        return Err(Error::invalid("W must align with the training rows"));
    }
    if a_hat.is_empty() {
        return Err(Error::invalid("no exposure-mean predictors"));
    }
    let mut responses = vec![0.0; data.n()];
    for (&i, &wi) in train.iter().zip(w) {
        responses[i] = wi;
    }
    let t = learner.fit(&responses, data.x(), train, derive_seed(seed, &[tag::LEARNER_T]))?;
    Ok(Box::new(TRefitPredictor { t, a_hat, beta_init }))
}

/// `r(x) = log( N(x) P1(x) / P0(x) )` with `N` the mean of `e^{-beta_init A}`
/// among cases and `P1`, `P0` the case and control frequencies given `x`.
struct RatioPredictor {
    numerator: Box<dyn Predictor>,
    case_freq: Box<dyn Predictor>,
    control_freq: Box<dyn Predictor>,
    prob_clip: f64,
}

impl Predictor for RatioPredictor {
    fn predict(&self, row: &[f64]) -> f64 {
        let num = self.numerator.predict(row).max(RATIO_NUMERATOR_FLOOR);
        let p1 = clamp_prob(self.case_freq.predict(row), self.prob_clip).0;
        let p0 = clamp_prob(self.control_freq.predict(row), self.prob_clip).0;
        clamp_r((num * p1 / p0).ln()).0
    }
}

/// Ratio refit of `r` from the moment condition
/// `E[(1 - Y) e^{r(X)} - Y e^{-beta A} | X] = 0`.
pub fn refit_r_ratio(
    data: &Dataset,
    learner: &dyn Learner,
    train: &[usize],
    beta_init: f64,
    prob_clip: f64,
    seed: u64,
) -> Result<Box<dyn Predictor>> {
    let (y, a) = (data.y(), data.a());
    let cases: Vec<usize> = train.iter().copied().filter(|&i| y[i] == 1.0).collect();
    if cases.is_empty() {
        return Err(Error::invalid("no cases (Y = 1) in the training rows"));
    }
    let tilted: Vec<f64> = a.iter().map(|&ai| exp_saturating(-beta_init * ai).0).collect();
    let s = derive_seed(seed, &[tag::LEARNER_RATIO]);
    let numerator = learner.fit(&tilted, data.x(), &cases, derive_seed(s, &[0]))?;
    let case_freq = learner.fit(y, data.x(), train, derive_seed(s, &[1]))?;
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let control_freq = learner.fit(&not_y, data.x(), train, derive_seed(s, &[2]))?;
    let den = control_freq.predict_rows(data.x(), train);
    if den.iter().all(|&d| d < prob_clip) {
        return Err(Error::numerical("degenerate Y=0 frequency model"));
    }
    Ok(Box::new(RatioPredictor {
        numerator,
        case_freq,
        control_freq,
        prob_clip,
    }))
}

/// Everything learned without outer fold `k`.
pub struct OuterFit {
    pub m_hat: Box<dyn Predictor>,
    pub r_hat: Box<dyn Predictor>,
    pub beta_init: f64,
    pub clamped: usize,
}

/// Nuisance fits for one outer fold given its training rows.
pub fn fit_outer_fold(
    data: &Dataset,
    learner: &dyn Learner,
    train: &[usize],
    cfg: &RefitConfig,
    seed: u64,
) -> Result<OuterFit> {
    let m_hat = fit_m_fold(data, learner, train, derive_seed(seed, &[tag::LEARNER_M]))?;
    let inner = make_folds(train.len(), cfg.k_inner, derive_seed(seed, &[tag::INNER_FOLDS]))?;
    let fa = fit_full_and_a(data, learner, train, &inner, cfg.prob_clip, seed)?;
    let beta_init = estimate_beta_init(&fa.logit_m, &fa.resid)?;
    let r_hat = match cfg.r_variant {
        RVariant::TRefit => refit_r_t(data, learner, train, &fa.logit_m, beta_init, fa.a_hat, seed)?,
        RVariant::RatioRefit => refit_r_ratio(data, learner, train, beta_init, cfg.prob_clip, seed)?,
    };
    Ok(OuterFit {
        m_hat,
        r_hat,
        beta_init,
        clamped: fa.clamped,
    })
}

/// Cross-fitted estimate of `beta` with out-of-fold nuisances.
pub fn estimate_ml(data: &Dataset, learner: &dyn Learner, cfg: &RefitConfig, phi: PhiKind) -> Result<EstimateReport> {
    cfg.validate()?;
    let plan = make_folds(data.n(), cfg.k_outer, derive_seed(cfg.seed, &[tag::OUTER_FOLDS]))?;
    estimate_ml_with_plan(data, learner, cfg, phi, &plan)
}

/// As [`estimate_ml`] with an explicit outer fold plan. With
/// `FoldPlan::no_split` the nuisances are fitted and evaluated on all rows.
#[doc(hidden)]
pub fn estimate_ml_with_plan(
    data: &Dataset,
    learner: &dyn Learner,
    cfg: &RefitConfig,
    phi: PhiKind,
    plan: &FoldPlan,
) -> Result<EstimateReport> {
    if plan.n() != data.n() {
        return Err(Error::invalid("fold plan does not match the data"));
    }
    let n = data.n();
    let fits: Vec<OuterFit> = (1..=plan.k())
        .into_par_iter()
        .map(|k| {
            let seed = derive_seed(cfg.seed, &[tag::OUTER_FOLDS, k as u64]);
            fit_outer_fold(data, learner, &plan.training(k), cfg, seed).map_err(|e| e.in_fold(k))
        })
        .collect::<Result<_>>()?;

    let mut r_oof = vec![0.0; n];
    let mut m_oof = vec![0.0; n];
    let mut laws = Vec::with_capacity(plan.k());
    for (idx, fit) in fits.iter().enumerate() {
        let k = idx + 1;
        let held = plan.held_out(k);
        let r = fit.r_hat.predict_rows(data.x(), &held);
        let m = fit.m_hat.predict_rows(data.x(), &held);
        for (t, &i) in held.iter().enumerate() {
            r_oof[i] = r[t];
            m_oof[i] = m[t];
        }
        if phi == PhiKind::Opt {
            let train = plan.training(k);
            let mut m_train = vec![0.0; n];
            for (i, v) in train.iter().zip(fit.m_hat.predict_rows(data.x(), &train)) {
                m_train[*i] = v;
            }
            laws.push(ConditionalLaw::detect(data.y(), data.a(), &m_train, &train));
        }
    }

    let bracket = BracketConfig::default();
    let mut diagnostics = BTreeMap::new();
    let spec = match phi {
        PhiKind::None => PhiSpec::none(),
        PhiKind::Simp => PhiSpec::simp(),
        PhiKind::Opt => {
            let w = build_weights(plan, &r_oof, &m_oof, &PhiSpec::simp(), &laws)?;
            let pilot = NuisancePredictions::new(r_oof.clone(), m_oof.clone())?.with_weights(w)?;
            let b = solve_beta(data, &pilot, &bracket)?.beta_hat;
            diagnostics.insert("beta_pilot".to_string(), b);
            PhiSpec::opt(b)
        }
    };
    let w = build_weights(plan, &r_oof, &m_oof, &spec, &laws)?;
    let preds = NuisancePredictions::new(r_oof, m_oof)?
        .with_weights(w)?
        .with_folds(plan.assignments().to_vec())?;
    let sol = solve_beta(data, &preds, &bracket)?;
    let se = sandwich_se(data, &preds, sol.beta_hat)?;

    for (idx, fit) in fits.iter().enumerate() {
        diagnostics.insert(format!("beta_init_fold_{}", idx + 1), fit.beta_init);
    }
    diagnostics.insert("prob_clamped".to_string(), fits.iter().map(|f| f.clamped).sum::<usize>() as f64);
    diagnostics.insert("r_clipped".to_string(), preds.r_clipped() as f64);
    diagnostics.insert("root_iterations".to_string(), sol.iters as f64);
    diagnostics.insert("root_residual".to_string(), sol.residual);
    diagnostics.insert("exp_saturations".to_string(), sol.saturations as f64);
    EstimateReport::new(sol.beta_hat, se, cfg.level, Method::MlCrossfit, sol.converged, diagnostics)
}
