//! Weighted-ℓ1 penalized minimisation of row-separable convex losses.
//!
//! Every nuisance fit in this crate has the form
//!
//! ```text
//! minimise  norm^-1 sum_i psi_i(z_i' theta)  +  sum_j pen_j |theta_j|
//! ```
//!
//! with `pen_j = 0` for unpenalized coordinates (intercept, exposure). The
//! solver runs accelerated proximal gradient with backtracking until the
//! support settles, then an active-set Newton phase that drives the
//! stationarity conditions to near machine precision. With all penalties zero
//! it is plain damped Newton.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Loss of one row as a function of its linear predictor.
pub trait RowLoss {
    /// `(psi_i(eta), psi_i'(eta), psi_i''(eta))`.
    fn eval(&self, i: usize, eta: f64) -> (f64, f64, f64);
}

impl<F: Fn(usize, f64) -> (f64, f64, f64)> RowLoss for F {
    fn eval(&self, i: usize, eta: f64) -> (f64, f64, f64) {
        self(i, eta)
    }
}

pub struct Problem<'a, L> {
    pub design: &'a DMatrix<f64>,
    pub loss: L,
    /// Divisor of the summed loss (usually the full sample size).
    pub norm: f64,
    /// Per-coordinate penalty level; zero means unpenalized.
    pub penalty: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Relative objective change that ends the proximal-gradient phase.
    pub objective_tol: f64,
    /// Required stationarity violation at the returned point.
    pub kkt_tol: f64,
    pub newton_max_iter: usize,
    pub max_halvings: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iter: 5000,
            objective_tol: 1e-9,
            kkt_tol: 1e-9,
            newton_max_iter: 200,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub theta: DVector<f64>,
    pub objective: f64,
    pub kkt: f64,
    pub gradient_iters: usize,
    pub newton_iters: usize,
}

impl<'a, L: RowLoss> Problem<'a, L> {
    pub fn new(design: &'a DMatrix<f64>, loss: L, norm: f64, penalty: Vec<f64>) -> Result<Self> {
        if penalty.len() != design.ncols() {
            return Err(Error::invalid("penalty length must equal number of design columns"));
        }
        if penalty.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("penalties must be finite and non-negative"));
        }
        Ok(Problem {
            design,
            loss,
            norm,
            penalty,
        })
    }

    pub fn dim(&self) -> usize {
        self.design.ncols()
    }

    /// `Z theta`, touching only the nonzero coordinates.
    pub fn eta(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut eta = DVector::zeros(self.design.nrows());
        for (j, &t) in theta.iter().enumerate() {
            if t != 0.0 {
                eta.axpy(t, &self.design.column(j), 1.0);
            }
        }
        eta
    }

    pub fn smooth_value(&self, eta: &DVector<f64>) -> f64 {
        let s: f64 = eta.iter().enumerate().map(|(i, &e)| self.loss.eval(i, e).0).sum();
        s / self.norm
    }

    pub fn penalty_value(&self, theta: &DVector<f64>) -> f64 {
        theta.iter().zip(&self.penalty).map(|(t, p)| p * t.abs()).sum()
    }

    pub fn gradient(&self, eta: &DVector<f64>) -> DVector<f64> {
        let d1 = DVector::from_iterator(
            eta.len(),
            eta.iter().enumerate().map(|(i, &e)| self.loss.eval(i, e).1),
        );
        self.design.tr_mul(&d1) / self.norm
    }

    /// Largest violation of the subgradient optimality conditions.
    pub fn kkt_violation(&self, theta: &DVector<f64>) -> f64 {
        let g = self.gradient(&self.eta(theta));
        self.kkt_from_gradient(theta, &g)
    }

    fn kkt_from_gradient(&self, theta: &DVector<f64>, g: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..theta.len() {
            let pen = self.penalty[j];
            let v = if pen == 0.0 {
                g[j].abs()
            } else if theta[j] != 0.0 {
                (g[j] + pen * theta[j].signum()).abs()
            } else {
                (g[j].abs() - pen).max(0.0)
            };
            worst = worst.max(v);
        }
        worst
    }

    fn objective(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        let eta = self.eta(theta);
        (self.smooth_value(&eta) + self.penalty_value(theta), eta)
    }

    fn prox(&self, v: &DVector<f64>, step: f64) -> DVector<f64> {
        DVector::from_iterator(
            v.len(),
            v.iter().zip(&self.penalty).map(|(&x, &p)| {
                let t = p * step;
                if x > t {
                    x - t
                } else if x < -t {
                    x + t
                } else {
                    0.0
                }
            }),
        )
    }

    /// FISTA with backtracking and gradient-based restart.
    fn proximal_gradient(
        &self,
        theta0: DVector<f64>,
        opts: &SolverOptions,
    ) -> Result<(DVector<f64>, usize)> {
        let mut x = theta0;
        let mut y = x.clone();
        let mut t: f64 = 1.0;
        let mut lip = 1.0;
        let mut f_prev = f64::INFINITY;
        let mut calm = 0;
        for iter in 1..=opts.max_iter {
            let eta_y = self.eta(&y);
            let fy = self.smooth_value(&eta_y);
            let gy = self.gradient(&eta_y);
            lip *= 0.9;
            let (x_new, f_new) = loop {
                let cand = self.prox(&(&y - &gy / lip), 1.0 / lip);
                let eta_c = self.eta(&cand);
                let fc = self.smooth_value(&eta_c);
                let diff = &cand - &y;
                let bound = fy + gy.dot(&diff) + 0.5 * lip * diff.norm_squared();
                if fc.is_finite() && fc <= bound + 1e-12 * fy.abs().max(1.0) {
                    let total = fc + self.penalty_value(&cand);
                    break (cand, total);
                }
                lip *= 2.0;
                if lip > 1e20 {
                    return Err(Error::numerical("step size collapsed in proximal gradient"));
                }
            };
            let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let restart = (&y - &x_new).dot(&(&x_new - &x)) > 0.0;
            if restart {
                t = 1.0;
                y = x_new.clone();
            } else {
                y = &x_new + (&x_new - &x) * ((t - 1.0) / t_new);
                t = t_new;
            }
            x = x_new;
            if (f_prev - f_new).abs() <= opts.objective_tol * f_new.abs().max(1.0) {
                calm += 1;
                if calm >= 3 {
                    return Ok((x, iter));
                }
            } else {
                calm = 0;
            }
            f_prev = f_new;
        }
        Err(Error::NoConvergence(format!(
            "proximal gradient did not settle in {} iterations",
            opts.max_iter
        )))
    }

    /// Active-set Newton: Newton steps on the current support with signs held
    /// fixed, dropping coordinates that hit zero and adding the worst
    /// off-support violator once the support is stationary.
    fn active_set_newton(
        &self,
        theta0: DVector<f64>,
        opts: &SolverOptions,
    ) -> Result<(DVector<f64>, usize)> {
        let p = self.dim();
        let mut theta = theta0;
        let mut signs: Vec<f64> = (0..p)
            .map(|j| {
                if self.penalty[j] == 0.0 || theta[j] == 0.0 {
                    0.0
                } else {
                    theta[j].signum()
                }
            })
            .collect();
        let is_active = |j: usize, signs: &[f64]| self.penalty[j] == 0.0 || signs[j] != 0.0;

        for iter in 1..=opts.newton_max_iter {
            let eta = self.eta(&theta);
            let g = self.gradient(&eta);
            let active: Vec<usize> = (0..p).filter(|&j| is_active(j, &signs)).collect();
            let g_s = DVector::from_iterator(
                active.len(),
                active.iter().map(|&j| g[j] + self.penalty[j] * signs[j]),
            );
            let stationary = g_s.amax() <= 0.1 * opts.kkt_tol;
            if stationary {
                // Support is optimal; look for an off-support coordinate that should enter.
                let entering = (0..p)
                    .filter(|&j| !is_active(j, &signs))
                    .map(|j| (j, g[j].abs() - self.penalty[j]))
                    .filter(|&(_, v)| v > 0.1 * opts.kkt_tol)
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                match entering {
                    None => return Ok((theta, iter)),
                    Some((j, _)) => {
                        signs[j] = -g[j].signum();
                        continue;
                    }
                }
            }

            let hess = self.restricted_hessian(&eta, &active);
            let dir = match hess.clone().cholesky() {
                Some(ch) => ch.solve(&(-&g_s)),
                None => {
                    let ridge = 1e-10 * hess.diagonal().amax().max(1e-300);
                    let damped = hess + DMatrix::identity(active.len(), active.len()) * ridge;
                    damped
                        .cholesky()
                        .ok_or_else(|| Error::numerical("singular Hessian on active set"))?
                        .solve(&(-&g_s))
                }
            };

            // Longest step before an active penalized coordinate crosses zero.
            let mut t_max = 1.0;
            let mut blocking = None;
            for (k, &j) in active.iter().enumerate() {
                if signs[j] != 0.0 && theta[j] * dir[k] < 0.0 {
                    let t = -theta[j] / dir[k];
                    if t < t_max {
                        t_max = t;
                        blocking = Some(j);
                    }
                }
            }

            let restricted = |th: &DVector<f64>| -> f64 {
                let (f, _) = self.objective(th);
                f
            };
            let f0 = restricted(&theta);
            let mut step = t_max;
            let mut accepted = None;
            for _ in 0..=opts.max_halvings {
                let mut cand = theta.clone();
                for (k, &j) in active.iter().enumerate() {
                    cand[j] += step * dir[k];
                }
                if step == t_max {
                    if let Some(j) = blocking {
                        cand[j] = 0.0;
                    }
                }
                let fc = restricted(&cand);
                if fc.is_finite() && fc <= f0 + 1e-15 * f0.abs().max(1.0) {
                    accepted = Some((cand, step == t_max));
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some((cand, full)) => {
                    let moved = (&cand - &theta).amax();
                    theta = cand;
                    if full {
                        if let Some(j) = blocking {
                            signs[j] = 0.0;
                            theta[j] = 0.0;
                        }
                    }
                    if moved == 0.0 && blocking.is_none() {
                        // Cannot improve further in floating point.
                        return Ok((theta, iter));
                    }
                }
                None => return Ok((theta, iter)),
            }
        }
        Ok((theta, opts.newton_max_iter))
    }

    fn restricted_hessian(&self, eta: &DVector<f64>, active: &[usize]) -> DMatrix<f64> {
        let n = eta.len();
        let d2: Vec<f64> = eta.iter().enumerate().map(|(i, &e)| self.loss.eval(i, e).2).collect();
        let k = active.len();
        let mut zs = DMatrix::zeros(n, k);
        for (c, &j) in active.iter().enumerate() {
            zs.set_column(c, &self.design.column(j));
        }
        let mut weighted = zs.clone();
        for c in 0..k {
            for i in 0..n {
                weighted[(i, c)] *= d2[i];
            }
        }
        zs.tr_mul(&weighted) / self.norm
    }

    /// Solves the penalized problem from `theta0`.
    pub fn solve(&self, theta0: DVector<f64>, opts: &SolverOptions) -> Result<Solution> {
        if theta0.len() != self.dim() {
            return Err(Error::invalid("starting point has wrong dimension"));
        }
        let all_unpenalized = self.penalty.iter().all(|&p| p == 0.0);
        let (mut theta, gradient_iters) = if all_unpenalized {
            (theta0, 0)
        } else {
            self.proximal_gradient(theta0, opts)?
        };
        let mut newton_iters = 0;
        for _ in 0..3 {
            let (th, it) = self.active_set_newton(theta, opts)?;
            theta = th;
            newton_iters += it;
            if self.kkt_violation(&theta) <= opts.kkt_tol {
                break;
            }
        }
        let kkt = self.kkt_violation(&theta);
        let (objective, _) = self.objective(&theta);
        Ok(Solution {
            theta,
            objective,
            kkt,
            gradient_iters,
            newton_iters,
        })
    }
}
