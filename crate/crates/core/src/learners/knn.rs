use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::{check_fit_input, Learner, Predictor};
use crate::error::{Error, Result};

/// Euclidean k-nearest-neighbour mean. Ties in distance go to the lower
/// training index.
#[derive(Debug, Clone)]
pub struct KnnLearner {
    k: usize,
}

impl KnnLearner {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        Ok(KnnLearner { k })
    }

    pub fn default_k() -> usize {
        15
    }
}

struct KnnPredictor {
    k: usize,
    p: usize,
    rows: Vec<f64>,
    responses: Vec<f64>,
}

impl Predictor for KnnPredictor {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut d: Vec<(f64, usize)> = self
            .rows
            .chunks_exact(self.p.max(1))
            .take(self.responses.len())
            .enumerate()
            .map(|(i, r)| {
                let d2 = if self.p == 0 {
                    0.0
                } else {
                    r.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum()
                };
                (d2, i)
            })
            .collect();
        let k = self.k.min(d.len());
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < d.len() {
            d.select_nth_unstable_by(k - 1, cmp);
        }
        d[..k].iter().map(|&(_, i)| self.responses[i]).sum::<f64>() / k as f64
    }
}

impl Learner for KnnLearner {
    fn name(&self) -> &str {
        "knn"
    }

    fn hyperparams(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([("k".to_string(), self.k as f64)])
    }

    fn fit(&self, responses: &[f64], covariates: &DMatrix<f64>, indices: &[usize], _seed: u64) -> Result<Box<dyn Predictor>> {
        check_fit_input(responses, covariates, indices)?;
        let p = covariates.ncols();
        let mut rows = Vec::with_capacity(indices.len() * p.max(1));
        for &i in indices {
            if p == 0 {
                rows.push(0.0);
            }
            for j in 0..p {
                rows.push(covariates[(i, j)]);
            }
        }
        Ok(Box::new(KnnPredictor {
            k: self.k,
            p,
            rows,
            responses: indices.iter().map(|&i| responses[i]).collect(),
        }))
    }
}
