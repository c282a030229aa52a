//! The doubly robust estimating function and the scalar solve for the exposure effect.
//!
//! For one observation the estimating function is
//!
//! ```text
//! h(Y, A; beta, r, m) = { Y e^{-beta A} - (1 - Y) e^{r} } (A - m)
//! ```
//!
//! and the estimate solves `n^-1 sum w_i h_i(beta) = 0`. With `w = 1` and
//! in-sample nuisances this is the plain doubly robust equation; with out-of-fold
//! nuisances it is the cross-fitted one; with `w = phi e^{-r}` it is the
//! efficiency-weighted one. All three share this solver.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NuisancePredictions};
use crate::error::{Error, Result};
use crate::math::exp_saturating;

/// `h` evaluated at one observation; saturates instead of overflowing.
pub fn eval_h(y: f64, a: f64, beta: f64, r_val: f64, m_val: f64) -> f64 {
    eval_h_checked(y, a, beta, r_val, m_val).0
}

/// `h` plus a flag that is set when an exponential saturated.
pub fn eval_h_checked(y: f64, a: f64, beta: f64, r_val: f64, m_val: f64) -> (f64, bool) {
    let (lead, sat) = if y == 1.0 {
        exp_saturating(-beta * a)
    } else {
        let (e, sat) = exp_saturating(r_val);
        (-e, sat)
    };
    (lead * (a - m_val), sat)
}

/// `dh/dbeta = -Y A e^{-beta A} (A - m)`.
pub fn dh_dbeta(y: f64, a: f64, beta: f64, m_val: f64) -> f64 {
    if y == 1.0 {
        -a * exp_saturating(-beta * a).0 * (a - m_val)
    } else {
        0.0
    }
}

/// The weighted sample mean of `h` as a function of `beta`.
#[derive(Debug, Clone, Copy)]
pub struct EstimatingEquation<'a> {
    data: &'a Dataset,
    preds: &'a NuisancePredictions,
}

impl<'a> EstimatingEquation<'a> {
    pub fn new(data: &'a Dataset, preds: &'a NuisancePredictions) -> Result<Self> {
        preds.check_against(data)?;
        Ok(EstimatingEquation { data, preds })
    }

    /// Value at `beta` and the number of saturated exponentials.
    pub fn value(&self, beta: f64) -> (f64, usize) {
        let (y, a) = (self.data.y(), self.data.a());
        let (r, m, w) = (self.preds.r_hat(), self.preds.m_hat(), self.preds.w_hat());
        let mut sum = 0.0;
        let mut sat = 0;
        for i in 0..y.len() {
            let (h, s) = eval_h_checked(y[i], a[i], beta, r[i], m[i]);
            sum += w[i] * h;
            sat += s as usize;
        }
        (sum / y.len() as f64, sat)
    }

    pub fn derivative(&self, beta: f64) -> f64 {
        let (y, a) = (self.data.y(), self.data.a());
        let (m, w) = (self.preds.m_hat(), self.preds.w_hat());
        let sum: f64 = (0..y.len()).map(|i| w[i] * dh_dbeta(y[i], a[i], beta, m[i])).sum();
        sum / y.len() as f64
    }

    /// `1 + n^-1 sum |w_i| (|A_i| + |m_i|)`, the scale the tolerance is relative to.
    pub fn scale(&self) -> f64 {
        let (a, m, w) = (self.data.a(), self.preds.m_hat(), self.preds.w_hat());
        let s: f64 = (0..a.len()).map(|i| w[i].abs() * (a[i].abs() + m[i].abs())).sum();
        1.0 + s / a.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BracketConfig {
    /// Half-width of the widest bracket tried.
    pub b_max: f64,
    pub max_iter: usize,
    /// Relative tolerance; the absolute one is this times [`EstimatingEquation::scale`].
    pub tol: f64,
}

impl Default for BracketConfig {
    fn default() -> Self {
        BracketConfig {
            b_max: 50.0,
            max_iter: 200,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootSolution {
    pub beta_hat: f64,
    pub converged: bool,
    pub iters: usize,
    /// Equation value at `beta_hat`.
    pub residual: f64,
    pub saturations: usize,
}

/// Expansion points `0, ±1, ±2, ±4, …, ±b_max` in ascending order.
fn bracket_grid(b_max: f64) -> Vec<f64> {
    let mut pos = vec![];
    let mut b = 1.0;
    while b < b_max {
        pos.push(b);
        b *= 2.0;
    }
    pos.push(b_max);
    let mut grid: Vec<f64> = pos.iter().rev().map(|v| -v).collect();
    grid.push(0.0);
    grid.extend(pos);
    grid
}

/// Solves the weighted estimating equation for `beta`.
///
/// A sign change is searched outward from zero over the geometric grid;
/// the innermost bracket is refined by Newton steps that fall back to
/// bisection whenever a step leaves the bracket or stalls. Without a sign
/// change the minimiser of `|equation|` is returned with `converged = false`.
pub fn solve_beta(
    data: &Dataset,
    preds: &NuisancePredictions,
    cfg: &BracketConfig,
) -> Result<RootSolution> {
    let eq = EstimatingEquation::new(data, preds)?;
    let tol = cfg.tol * eq.scale();
    let mut saturations = 0;
    let mut eval = |b: f64| -> Result<f64> {
        let (v, s) = eq.value(b);
        saturations += s;
        if v.is_nan() {
            return Err(Error::numerical(format!("estimating equation is NaN at beta = {b}")));
        }
        Ok(v)
    };

    let grid = bracket_grid(cfg.b_max);
    let vals = grid.iter().map(|&b| eval(b)).collect::<Result<Vec<_>>>()?;
    let zero = grid.len() / 2;
    if vals[zero].abs() <= tol {
        return Ok(RootSolution {
            beta_hat: 0.0,
            converged: true,
            iters: 0,
            residual: vals[zero],
            saturations,
        });
    }

    // Innermost sign change: check [0,1], [-1,0], [1,2], [-2,-1], ...
    let mut bracket = None;
    for step in 0..zero {
        let right = (zero + step, zero + step + 1);
        let left = (zero - step - 1, zero - step);
        for (lo, hi) in [right, left] {
            if vals[lo].signum() != vals[hi].signum() || vals[lo] == 0.0 || vals[hi] == 0.0 {
                bracket = Some((lo, hi));
                break;
            }
        }
        if bracket.is_some() {
            break;
        }
    }

    let Some((lo_i, hi_i)) = bracket else {
        let (beta_hat, residual, iters) = minimise_abs(&mut eval, &grid, &vals)?;
        return Ok(RootSolution {
            beta_hat,
            converged: false,
            iters,
            residual,
            saturations,
        });
    };

    let (mut lo, mut hi) = (grid[lo_i], grid[hi_i]);
    let (mut f_lo, f_hi) = (vals[lo_i], vals[hi_i]);
    for (b, f) in [(lo, f_lo), (hi, f_hi)] {
        if f.abs() <= tol {
            return Ok(RootSolution {
                beta_hat: b,
                converged: true,
                iters: 0,
                residual: f,
                saturations,
            });
        }
    }

    let mut x = if lo <= 0.0 && 0.0 <= hi { 0.0 } else { 0.5 * (lo + hi) };
    let mut fx = eval(x)?;
    let mut last_step = hi - lo;
    for iter in 1..=cfg.max_iter {
        if fx.abs() <= tol {
            return Ok(RootSolution {
                beta_hat: x,
                converged: true,
                iters: iter - 1,
                residual: fx,
                saturations,
            });
        }
        if fx.signum() == f_lo.signum() {
            lo = x;
            f_lo = fx;
        } else {
            hi = x;
        }
        if hi - lo <= 4.0 * f64::EPSILON * (1.0 + x.abs()) {
            return Ok(RootSolution {
                beta_hat: x,
                converged: true,
                iters: iter,
                residual: fx,
                saturations,
            });
        }
        let d = eq.derivative(x);
        let newton = x - fx / d;
        let step = (newton - x).abs();
        // Newton only while it stays inside the bracket and keeps halving.
        let next = if newton.is_finite() && newton > lo && newton < hi && step <= 0.5 * last_step {
            newton
        } else {
            0.5 * (lo + hi)
        };
        last_step = (next - x).abs();
        x = next;
        fx = eval(x)?;
    }
    Ok(RootSolution {
        beta_hat: x,
        converged: fx.abs() <= tol,
        iters: cfg.max_iter,
        residual: fx,
        saturations,
    })
}

/// Golden-section refinement of `|f|` around the best grid point.
fn minimise_abs(
    eval: &mut impl FnMut(f64) -> Result<f64>,
    grid: &[f64],
    vals: &[f64],
) -> Result<(f64, f64, usize)> {
    let best = (0..grid.len())
        .min_by(|&i, &j| vals[i].abs().total_cmp(&vals[j].abs()))
        .expect("non-empty grid");
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(grid.len() - 1)];
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let mut fc = eval(c)?.abs();
    let mut fd = eval(d)?.abs();
    let mut iters = 0;
    while (b - a).abs() > 1e-10 * (1.0 + a.abs()) && iters < 200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = eval(c)?.abs();
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = eval(d)?.abs();
        }
        iters += 1;
    }
    let x = 0.5 * (a + b);
    let fx = eval(x)?;
    if fx.abs() <= vals[best].abs() {
        Ok((x, fx, iters))
    } else {
        Ok((grid[best], vals[best], iters))
    }
}

/// Lower bound on `|n^-1 sum w dh/dbeta|` below which the variance is undefined.
pub const SCORE_DERIVATIVE_GUARD: f64 = 1e-12;

/// Influence-function (sandwich) standard error of `beta_hat` with the
/// nuisance values held fixed:
/// `V = mean((w h)^2) / mean(w dh/dbeta)^2`, `se = sqrt(V / n)`.
pub fn sandwich_se(data: &Dataset, preds: &NuisancePredictions, beta_hat: f64) -> Result<f64> {
    preds.check_against(data)?;
    let n = data.n() as f64;
    let (y, a) = (data.y(), data.a());
    let (r, m, w) = (preds.r_hat(), preds.m_hat(), preds.w_hat());
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..data.n() {
        let wh = w[i] * eval_h(y[i], a[i], beta_hat, r[i], m[i]);
        num += wh * wh;
        den += w[i] * dh_dbeta(y[i], a[i], beta_hat, m[i]);
    }
    let (num, den) = (num / n, den / n);
    if den.abs() < SCORE_DERIVATIVE_GUARD {
        return Err(Error::numerical("degenerate score derivative"));
    }
    let v = num / (den * den);
    Ok((v / n).sqrt())
}
