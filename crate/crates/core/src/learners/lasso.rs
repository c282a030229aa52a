use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::ridge::LinearPredictor;
use super::{check_fit_input, Learner, Predictor};
use crate::error::{Error, Result};
use crate::hd_sparse::Lambda;
use crate::penalized::{Problem, SolverOptions};

/// ℓ1-penalized least squares; penalties scaled by column standard deviations.
/// `Lambda::Auto` uses `sd(R) * sqrt(log p / n)`.
#[derive(Debug, Clone)]
pub struct LassoLearner {
    lambda: Lambda,
}

impl LassoLearner {
    pub fn new(lambda: Lambda) -> Self {
        LassoLearner { lambda }
    }
}

impl Learner for LassoLearner {
    fn name(&self) -> &str {
        "lasso"
    }

    fn hyperparams(&self) -> BTreeMap<String, f64> {
        let v = match self.lambda {
            Lambda::Auto => f64::NAN,
            Lambda::Value(v) => v,
        };
        BTreeMap::from([("lambda".to_string(), v)])
    }

    fn fit(&self, responses: &[f64], covariates: &DMatrix<f64>, indices: &[usize], _seed: u64) -> Result<Box<dyn Predictor>> {
        check_fit_input(responses, covariates, indices)?;
        let n = indices.len();
        let p = covariates.ncols();
        let y: Vec<f64> = indices.iter().map(|&i| responses[i]).collect();
        let ybar = y.iter().sum::<f64>() / n as f64;
        let sd_y = (y.iter().map(|v| (v - ybar).powi(2)).sum::<f64>() / n as f64).sqrt();
        let lambda = match self.lambda {
            Lambda::Auto => {
                if sd_y == 0.0 {
                    return Ok(Box::new(LinearPredictor {
                        intercept: ybar,
                        coef: vec![0.0; p],
                    }));
                }
                sd_y * ((p.max(2) as f64).ln() / n as f64).sqrt()
            }
            Lambda::Value(v) if v.is_finite() && v >= 0.0 => v,
            Lambda::Value(v) => return Err(Error::invalid(format!("lasso lambda must be >= 0, got {v}"))),
        };
        let z = DMatrix::from_fn(n, p + 1, |r, j| if j == 0 { 1.0 } else { covariates[(indices[r], j - 1)] });
        let mut penalty = vec![0.0];
        for j in 1..=p {
            let col = z.column(j);
            let m = col.sum() / n as f64;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            penalty.push(lambda * if sd > 0.0 { sd } else { 1.0 });
        }
        let loss = |i: usize, e: f64| (0.5 * (e - y[i]).powi(2), e - y[i], 1.0);
        let prob = Problem::new(&z, loss, n as f64, penalty)?;
        let sol = prob.solve(DVector::zeros(p + 1), &SolverOptions::default())?;
        if sol.kkt > 1e-6 * sd_y.max(1.0) {
            return Err(Error::numerical(format!("lasso KKT violation {:.2e}", sol.kkt)));
        }
        Ok(Box::new(LinearPredictor {
            intercept: sol.theta[0],
            coef: sol.theta.iter().skip(1).copied().collect(),
        }))
    }
}
