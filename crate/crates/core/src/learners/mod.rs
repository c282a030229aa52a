//! Conditional-mean learners `L(R, C; I)`: fit `E[R | C]` on the rows `I`.
//!
//! A [`Learner`] only ever reads the rows listed in `indices`; the returned
//! [`Predictor`] owns everything it needs and is immutable.

mod forest;
mod knn;
mod lasso;
mod ridge;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hd_sparse::Lambda;

pub use forest::ForestLearner;
pub use knn::KnnLearner;
pub use lasso::LassoLearner;
pub use ridge::RidgeLearner;

pub trait Predictor: Send + Sync {
    fn predict(&self, row: &[f64]) -> f64;

    fn predict_rows(&self, covariates: &DMatrix<f64>, rows: &[usize]) -> Vec<f64> {
        let mut buf = vec![0.0; covariates.ncols()];
        rows.iter()
            .map(|&i| {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = covariates[(i, j)];
                }
                self.predict(&buf)
            })
            .collect()
    }
}

pub trait Learner: Send + Sync {
    fn name(&self) -> &str;

    fn hyperparams(&self) -> BTreeMap<String, f64>;

    fn fit(
        &self,
        responses: &[f64],
        covariates: &DMatrix<f64>,
        indices: &[usize],
        seed: u64,
    ) -> Result<Box<dyn Predictor>>;
}

pub(crate) fn check_fit_input(responses: &[f64], covariates: &DMatrix<f64>, indices: &[usize]) -> Result<()> {
    if responses.len() != covariates.nrows() {
        return Err(Error::invalid("responses and covariates differ in length"));
    }
    if indices.is_empty() {
        return Err(Error::invalid("learner fitted on an empty index set"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= responses.len()) {
        return Err(Error::invalid(format!("index {bad} out of range")));
    }
    if indices.iter().any(|&i| !responses[i].is_finite()) {
        return Err(Error::invalid("non-finite response"));
    }
    Ok(())
}

/// A predictor that returns the same value everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub f64);

impl Predictor for ConstantPredictor {
    fn predict(&self, _row: &[f64]) -> f64 {
        self.0
    }
}

/// Serializable description of a built-in learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LearnerSpec {
    Ridge {
        #[serde(default = "RidgeLearner::default_lambda")]
        lambda: f64,
    },
    Lasso {
        #[serde(default)]
        lambda: Lambda,
    },
    Knn {
        #[serde(default = "KnnLearner::default_k")]
        k: usize,
    },
    Forest {
        #[serde(default = "ForestLearner::default_trees")]
        trees: usize,
        #[serde(default = "ForestLearner::default_max_depth")]
        max_depth: usize,
        #[serde(default = "ForestLearner::default_min_leaf")]
        min_leaf: usize,
        /// Features tried per split; defaults to a third of the columns.
        #[serde(default)]
        mtry: Option<usize>,
    },
}

impl LearnerSpec {
    pub fn build(&self) -> Result<Box<dyn Learner>> {
        Ok(match *self {
            LearnerSpec::Ridge { lambda } => Box::new(RidgeLearner::new(lambda)?),
            LearnerSpec::Lasso { lambda } => Box::new(LassoLearner::new(lambda)),
            LearnerSpec::Knn { k } => Box::new(KnnLearner::new(k)?),
            LearnerSpec::Forest {
                trees,
                max_depth,
                min_leaf,
                mtry,
            } => Box::new(ForestLearner::new(trees, max_depth, min_leaf, mtry)?),
        })
    }
}

impl Default for LearnerSpec {
    fn default() -> Self {
        LearnerSpec::Ridge {
            lambda: RidgeLearner::default_lambda(),
        }
    }
}

impl FromStr for LearnerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ridge" => Ok(LearnerSpec::default()),
            "lasso" => Ok(LearnerSpec::Lasso { lambda: Lambda::Auto }),
            "knn" => Ok(LearnerSpec::Knn {
                k: KnnLearner::default_k(),
            }),
            "forest" => Ok(LearnerSpec::Forest {
                trees: ForestLearner::default_trees(),
                max_depth: ForestLearner::default_max_depth(),
                min_leaf: ForestLearner::default_min_leaf(),
                mtry: None,
            }),
            other => Err(Error::invalid(format!(
                "unknown learner '{other}' (expected ridge, lasso, knn or forest)"
            ))),
        }
    }
}

impl fmt::Display for LearnerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LearnerSpec::Ridge { .. } => "ridge",
            LearnerSpec::Lasso { .. } => "lasso",
            LearnerSpec::Knn { .. } => "knn",
            LearnerSpec::Forest { .. } => "forest",
        };
        f.write_str(name)
    }
}
