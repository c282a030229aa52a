use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::{check_fit_input, Learner, Predictor};
use crate::error::{Error, Result};

/// Penalized least squares with an unpenalized intercept:
/// `(Xc'Xc / n + lambda I) b = Xc'yc / n` on centered data.
#[derive(Debug, Clone)]
pub struct RidgeLearner {
    lambda: f64,
}

impl RidgeLearner {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::invalid(format!("ridge lambda must be >= 0, got {lambda}")));
        }
        Ok(RidgeLearner { lambda })
    }

    pub fn default_lambda() -> f64 {
        1e-3
    }
}

pub(crate) struct LinearPredictor {
    pub(crate) intercept: f64,
    pub(crate) coef: Vec<f64>,
}

impl Predictor for LinearPredictor {
    fn predict(&self, row: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(row).map(|(c, v)| c * v).sum::<f64>()
    }
}

impl Learner for RidgeLearner {
    fn name(&self) -> &str {
        "ridge"
    }

    fn hyperparams(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([("lambda".to_string(), self.lambda)])
    }

    fn fit(&self, responses: &[f64], covariates: &DMatrix<f64>, indices: &[usize], _seed: u64) -> Result<Box<dyn Predictor>> {
        check_fit_input(responses, covariates, indices)?;
        let n = indices.len() as f64;
        let p = covariates.ncols();
        let ybar = indices.iter().map(|&i| responses[i]).sum::<f64>() / n;
        let xbar: Vec<f64> = (0..p)
            .map(|j| indices.iter().map(|&i| covariates[(i, j)]).sum::<f64>() / n)
            .collect();
        let xc = DMatrix::from_fn(indices.len(), p, |r, j| covariates[(indices[r], j)] - xbar[j]);
        let yc = DVector::from_iterator(indices.len(), indices.iter().map(|&i| responses[i] - ybar));
        let mut gram = xc.tr_mul(&xc) / n;
        for j in 0..p {
            gram[(j, j)] += self.lambda;
        }
        let rhs = xc.tr_mul(&yc) / n;
        let coef = if p == 0 {
            DVector::zeros(0)
        } else {
            let chol = gram
                .cholesky()
                .ok_or_else(|| Error::numerical("singular ridge system"))?;
            chol.solve(&rhs)
        };
        if coef.iter().any(|c| !c.is_finite()) {
            return Err(Error::numerical("singular ridge system"));
        }
        let intercept = ybar - coef.iter().zip(&xbar).map(|(c, m)| c * m).sum::<f64>();
        Ok(Box::new(LinearPredictor {
            intercept,
            coef: coef.iter().copied().collect(),
        }))
    }
}
