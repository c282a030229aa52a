//! Doubly robust and double machine learning inference for the exposure
//! effect `beta` in the logistic partially linear model
//!
//! ```text
//! P(Y = 1 | A, X) = expit{ beta A + r(X) }.
//! ```
//!
//! Three nuisance regimes share one estimating equation
//! ([`estimating::solve_beta`]) and one variance routine:
//!
//! - [`lowdim`]: fixed-dimensional parametric `r` and `m`;
//! - [`hd_sparse`]: ℓ1-regularised fits whose optimality conditions are the
//!   moment constraints that remove first-order regularisation bias;
//! - [`ml_crossfit`]: arbitrary learners with cross-fitting and full-model
//!   refitting for `r`.
//!
//! [`simulate`] holds the data-generating processes and the Monte Carlo engine.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod efficiency;
pub mod error;
pub mod estimating;
pub mod estimator;
pub mod folds;
pub mod hd_sparse;
pub mod learners;
pub mod link;
pub mod lowdim;
pub mod math;
pub mod ml_crossfit;
pub mod penalized;
pub mod report;
pub mod seed;
pub mod simulate;

pub use data::{Dataset, NuisancePredictions};
pub use efficiency::{PhiKind, PhiSpec};
pub use error::{Error, Result};
pub use estimating::{eval_h, sandwich_se, solve_beta, BracketConfig, RootSolution};
pub use estimator::EstimatorConfig;
pub use folds::{make_folds, FoldPlan};
pub use hd_sparse::{HdConfig, SparseCoef};
pub use learners::{Learner, LearnerSpec, Predictor};
pub use link::LinkFunction;
pub use ml_crossfit::RefitConfig;
pub use report::{EstimateReport, Method};
pub use simulate::{DgpSpec, Scenario};
