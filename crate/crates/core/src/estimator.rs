//! One configuration object that selects and runs any of the three estimators.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::efficiency::PhiKind;
use crate::error::Result;
use crate::hd_sparse::{estimate_hd, HdConfig};
use crate::learners::LearnerSpec;
use crate::link::LinkFunction;
use crate::lowdim::{estimate_lowdim, LowdimOptions};
use crate::ml_crossfit::{estimate_ml, RefitConfig};
use crate::report::{EstimateReport, Method};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub method: Method,
    pub link: LinkFunction,
    pub phi: PhiKind,
    pub level: f64,
    pub lowdim: LowdimOptions,
    pub hd: HdConfig,
    /// Cross-fit the efficiency weights in the sparse regime.
    pub cross_fit_weights: bool,
    pub learner: LearnerSpec,
    pub refit: RefitConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            method: Method::Lowdim,
            link: LinkFunction::Identity,
            phi: PhiKind::None,
            level: 0.95,
            lowdim: LowdimOptions::default(),
            hd: HdConfig::default(),
            cross_fit_weights: true,
            learner: LearnerSpec::default(),
            refit: RefitConfig::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn new(method: Method) -> Self {
        EstimatorConfig {
            method,
            ..EstimatorConfig::default()
        }
    }

    /// Runs the selected estimator. `seed` drives every random split and
    /// stochastic learner.
    pub fn fit(&self, data: &Dataset, seed: u64) -> Result<EstimateReport> {
        match self.method {
            Method::Lowdim => {
                let opts = LowdimOptions {
                    level: self.level,
                    ..self.lowdim
                };
                estimate_lowdim(data, self.link, self.phi, &opts)
            }
            Method::HdSparse => {
                let cfg = HdConfig {
                    level: self.level,
                    seed,
                    ..self.hd.clone()
                };
                estimate_hd(data, self.link, &cfg, self.phi, self.cross_fit_weights)
            }
            Method::MlCrossfit => {
                let cfg = RefitConfig {
                    level: self.level,
                    seed,
                    ..self.refit.clone()
                };
                let learner = self.learner.build()?;
                estimate_ml(data, learner.as_ref(), &cfg, self.phi)
            }
        }
    }
}
