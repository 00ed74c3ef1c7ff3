//! End-to-end estimation pipeline: first-stage propensity fit, weight
//! construction for the requested method, and the weighted PH fit. This is
//! the unit the bootstrap refits per replicate, so the whole chain lives in
//! one call.

use nalgebra::DMatrix;

use crate::data::{build_counting_view, Dataset};
use crate::error::{Error, Result};
use crate::logistic::{fit_logistic, LogisticFit};
use crate::phfit::{fit, FitOptions, PhFit};
use crate::weights::{
    fit_projection, kappa_hat, kappa_v_hat, truncate_weights, DesignPolicy, WeightMethod,
    WeightSet, DEFAULT_TRUNCATION,
};

/// Fits the instrument propensity model P(V=1 | X) by logistic MLE on
/// (1, X).
pub fn fit_propensity(dataset: &Dataset) -> Result<LogisticFit> {
    let n = dataset.n();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let p = dataset.p;
    let mut design = DMatrix::zeros(n, p + 1);
    let mut outcomes = Vec::with_capacity(n);
    for (i, r) in dataset.records.iter().enumerate() {
        design[(i, 0)] = 1.0;
        for (j, &x) in r.covariates.iter().enumerate() {
            design[(i, j + 1)] = x;
        }
        outcomes.push(r.instrument as f64);
    }
    fit_logistic(&outcomes, &design)
}

#[derive(Debug, Clone, Copy)]
pub struct Pipeline {
    pub method: WeightMethod,
    pub design_policy: DesignPolicy,
    pub fit_options: FitOptions,
    pub truncation: (f64, f64),
}

impl Pipeline {
    pub fn new(method: WeightMethod) -> Self {
        Pipeline {
            method,
            design_policy: DesignPolicy::default(),
            fit_options: FitOptions::default(),
            truncation: DEFAULT_TRUNCATION,
        }
    }
}

/// Result of a full pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineFit {
    /// First-stage fit; absent for unit and oracle weights.
    pub propensity: Option<LogisticFit>,
    pub weights: WeightSet,
    pub fit: PhFit,
}

impl Pipeline {
    /// Builds the weight set for this pipeline's method. `oracle` supplies
    /// the latent complier labels and is required only for oracle weights.
    pub fn build_weights(&self, dataset: &Dataset, oracle: Option<&[bool]>) -> Result<WeightSet> {
        match self.method {
            WeightMethod::Unit => Ok(WeightSet::unit(dataset.n())),
            WeightMethod::Oracle => {
                let labels = oracle.ok_or_else(|| {
                    Error::Config("oracle weights need latent complier labels".into())
                })?;
                if labels.len() != dataset.n() {
                    return Err(Error::DimensionMismatch {
                        expected: dataset.n(),
                        got: labels.len(),
                    });
                }
                Ok(WeightSet::oracle(labels))
            }
            WeightMethod::Kappa => {
                let prop = fit_propensity(dataset)?;
                kappa_hat(&prop, dataset)
            }
            WeightMethod::KappaV => {
                let prop = fit_propensity(dataset)?;
                let proj = fit_projection(dataset, self.design_policy)?;
                kappa_v_hat(&prop, &proj, dataset)
            }
            WeightMethod::KappaVTr => {
                let prop = fit_propensity(dataset)?;
                let proj = fit_projection(dataset, self.design_policy)?;
                let kv = kappa_v_hat(&prop, &proj, dataset)?;
                truncate_weights(&kv, self.truncation)
            }
        }
    }

    /// Runs the full chain on `dataset`. `cause` selects the event cause in
    /// competing-risks mode; `oracle` supplies latent complier labels for
    /// oracle weights.
    pub fn run(
        &self,
        dataset: &Dataset,
        cause: Option<u32>,
        oracle: Option<&[bool]>,
    ) -> Result<PipelineFit> {
        let weights = self.build_weights(dataset, oracle)?;
        let view = build_counting_view(dataset, cause)?;
        let fit = fit(&view, &weights, &self.fit_options)?;
        Ok(PipelineFit {
            propensity: weights.propensity_fit.clone(),
            weights,
            fit,
        })
    }
}
