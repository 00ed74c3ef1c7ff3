//! The three compliance weight schemes: the signed kappa weight, its
//! projection kappa_v estimated by stratified logistic regression, and the
//! truncated kappa_v_tr, plus unit and oracle-complier weights for
//! benchmarking.

use nalgebra::DMatrix;

use crate::data::{Dataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::logistic::{fit_logistic_weighted, LogisticFit, PROB_CLAMP};

/// Weight construction method tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMethod {
    Kappa,
    KappaV,
    KappaVTr,
    Unit,
    Oracle,
}

impl WeightMethod {
    pub fn label(&self) -> &'static str {
        match self {
            WeightMethod::Kappa => "kappa",
            WeightMethod::KappaV => "kappa_v",
            WeightMethod::KappaVTr => "kappa_v_tr",
            WeightMethod::Unit => "unit",
            WeightMethod::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kappa" => Ok(WeightMethod::Kappa),
            "kappa_v" | "kappa-v" => Ok(WeightMethod::KappaV),
            "kappa_v_tr" | "kappa-v-tr" => Ok(WeightMethod::KappaVTr),
            "unit" | "naive" => Ok(WeightMethod::Unit),
            "oracle" | "complier" => Ok(WeightMethod::Oracle),
            other => Err(Error::Config(format!("unknown weight method `{other}`"))),
        }
    }
}

/// Regressor construction for the per-stratum projection model of v0(U).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DesignPolicy {
    /// W, each X_j, W^2, each X_j^2, each W*X_j.
    #[default]
    SecondOrder,
    /// W, each X_j.
    FirstOrder,
    /// W, each X_j, each W*X_j.
    InteractionOnly,
    /// Each X_j only (the stratified simple model used for observational data).
    Marginal,
}

impl DesignPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "second_order" | "second-order" => Ok(DesignPolicy::SecondOrder),
            "first_order" | "first-order" => Ok(DesignPolicy::FirstOrder),
            "interaction_only" | "interaction-only" => Ok(DesignPolicy::InteractionOnly),
            "marginal" => Ok(DesignPolicy::Marginal),
            other => Err(Error::Config(format!("unknown design policy `{other}`"))),
        }
    }

    /// Regressors (excluding the intercept) for a subject with follow-up w
    /// and covariates x.
    pub fn regressors(&self, w: f64, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        match self {
            DesignPolicy::SecondOrder => {
                out.push(w);
                out.extend_from_slice(x);
                out.push(w * w);
                out.extend(x.iter().map(|&v| v * v));
                out.extend(x.iter().map(|&v| w * v));
            }
            DesignPolicy::FirstOrder => {
                out.push(w);
                out.extend_from_slice(x);
            }
            DesignPolicy::InteractionOnly => {
                out.push(w);
                out.extend_from_slice(x);
                out.extend(x.iter().map(|&v| w * v));
            }
            DesignPolicy::Marginal => {
                out.extend_from_slice(x);
            }
        }
        out
    }
}

/// Model fitted within one (delta, D) stratum.
#[derive(Debug, Clone)]
pub enum StratumModel {
    Logistic { fit: LogisticFit, policy: DesignPolicy },
    /// Constant fallback: the stratum's empirical mean of V.
    Constant(f64),
}

#[derive(Debug, Clone)]
pub struct StratumFit {
    pub delta: u8,
    pub treatment: u8,
    pub n: usize,
    pub model: StratumModel,
    /// Set when the requested policy failed and a fallback was applied.
    pub fallback: Option<String>,
}

impl StratumFit {
    fn predict(&self, w: f64, x: &[f64]) -> Result<f64> {
        match &self.model {
            StratumModel::Logistic { fit, policy } => fit.predict_prob(&policy.regressors(w, x)),
            StratumModel::Constant(v) => Ok(v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)),
        }
    }
}

/// Per-stratum projection fits for v0(U) = P(V=1 | W, delta, D, X).
#[derive(Debug, Clone)]
pub struct ProjectionFits {
    pub strata: Vec<StratumFit>,
}

impl ProjectionFits {
    fn stratum(&self, delta: u8, treatment: u8) -> Result<&StratumFit> {
        self.strata
            .iter()
            .find(|s| s.delta == delta && s.treatment == treatment)
            .ok_or_else(|| Error::Config(format!("no stratum fit for (delta={delta}, d={treatment})")))
    }

    pub fn predict(&self, record: &SubjectRecord) -> Result<f64> {
        let delta = u8::from(record_has_event(record));
        self.stratum(delta, record.treatment)?
            .predict(record.time, &record.covariates)
    }
}

fn record_has_event(r: &SubjectRecord) -> bool {
    if let Some(times) = &r.event_times {
        !times.is_empty()
    } else {
        r.status != 0
    }
}

/// Per-subject weight values plus the construction method.
#[derive(Debug, Clone)]
pub struct WeightSet {
    pub values: Vec<f64>,
    pub method: WeightMethod,
    pub propensity_fit: Option<LogisticFit>,
    pub projection_fits: Option<ProjectionFits>,
    pub truncation_interval: Option<(f64, f64)>,
}

impl WeightSet {
    pub fn unit(n: usize) -> WeightSet {
        WeightSet {
            values: vec![1.0; n],
            method: WeightMethod::Unit,
            propensity_fit: None,
            projection_fits: None,
            truncation_interval: None,
        }
    }

    /// Complier-indicator weights; labels come from the simulator only.
    pub fn oracle(complier: &[bool]) -> WeightSet {
        WeightSet {
            values: complier.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect(),
            method: WeightMethod::Oracle,
            propensity_fit: None,
            projection_fits: None,
            truncation_interval: None,
        }
    }

    pub fn has_negative(&self) -> bool {
        self.values.iter().any(|&w| w < 0.0)
    }
}

fn kappa_value(d: f64, v: f64, psi: f64) -> f64 {
    1.0 - d * (1.0 - v) / (1.0 - psi) - (1.0 - d) * v / psi
}

/// The signed Abadie weight: kappa_i = 1 - D(1-V)/(1-psi) - (1-D)V/psi.
pub fn kappa_hat(propensity_fit: &LogisticFit, dataset: &Dataset) -> Result<WeightSet> {
    let mut values = Vec::with_capacity(dataset.n());
    for r in &dataset.records {
        let psi = propensity_fit.predict_prob(&r.covariates)?;
        if psi <= PROB_CLAMP || psi >= 1.0 - PROB_CLAMP {
            return Err(Error::DegeneratePropensity { id: r.id.clone() });
        }
        values.push(kappa_value(r.treatment as f64, r.instrument as f64, psi));
    }
    Ok(WeightSet {
        values,
        method: WeightMethod::Kappa,
        propensity_fit: Some(propensity_fit.clone()),
        projection_fits: None,
        truncation_interval: None,
    })
}

fn fit_stratum(
    records: &[&SubjectRecord],
    delta: u8,
    treatment: u8,
    policy: DesignPolicy,
) -> StratumFit {
    let n = records.len();
    let outcomes: Vec<f64> = records.iter().map(|r| r.instrument as f64).collect();
    let mean_v = if n == 0 {
        0.5
    } else {
        outcomes.iter().sum::<f64>() / n as f64
    };

    let one_class = outcomes.iter().all(|&v| v == 0.0) || outcomes.iter().all(|&v| v == 1.0);

    let attempt = |pol: DesignPolicy| -> Result<LogisticFit> {
        let ncols = records
            .first()
            .map(|r| pol.regressors(r.time, &r.covariates).len() + 1)
            .unwrap_or(1);
        if n < 10.max(2 * ncols) || one_class {
            return Err(Error::StratumTooSmall {
                delta,
                treatment,
                reason: if one_class {
                    "single outcome class".into()
                } else {
                    format!("{n} records for {ncols} regressors")
                },
            });
        }
        let design = DMatrix::from_fn(n, ncols, |i, j| {
            if j == 0 {
                1.0
            } else {
                pol.regressors(records[i].time, &records[i].covariates)[j - 1]
            }
        });
        let fit = fit_logistic_weighted(&outcomes, &design, None, &format!("{pol:?}"))?;
        if !fit.converged {
            return Err(Error::StratumTooSmall {
                delta,
                treatment,
                reason: "stratum fit did not converge".into(),
            });
        }
        Ok(fit)
    };

    match attempt(policy) {
        Ok(fit) => StratumFit {
            delta,
            treatment,
            n,
            model: StratumModel::Logistic { fit, policy },
            fallback: None,
        },
        Err(first_err) => {
            if policy != DesignPolicy::FirstOrder {
                if let Ok(fit) = attempt(DesignPolicy::FirstOrder) {
                    return StratumFit {
                        delta,
                        treatment,
                        n,
                        model: StratumModel::Logistic {
                            fit,
                            policy: DesignPolicy::FirstOrder,
                        },
                        fallback: Some(format!("first_order after: {first_err}")),
                    };
                }
            }
            StratumFit {
                delta,
                treatment,
                n,
                model: StratumModel::Constant(mean_v),
                fallback: Some(format!("constant mean after: {first_err}")),
            }
        }
    }
}

/// Fits the projection model for V within each (delta, D) stratum. Strata
/// that are too small or separated fall back to first-order regressors and
/// then to the stratum mean of V; the fallback is recorded on the fit.
pub fn fit_projection(dataset: &Dataset, policy: DesignPolicy) -> Result<ProjectionFits> {
    if dataset.n() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut strata = Vec::with_capacity(4);
    for delta in 0..=1u8 {
        for treatment in 0..=1u8 {
            let records: Vec<&SubjectRecord> = dataset
                .records
                .iter()
                .filter(|r| u8::from(record_has_event(r)) == delta && r.treatment == treatment)
                .collect();
            strata.push(fit_stratum(&records, delta, treatment, policy));
        }
    }
    Ok(ProjectionFits { strata })
}

/// The projected weight: kappa_v = 1 - D(1-v)/(1-psi) - (1-D)v/psi with
/// v = v_hat(U) from the subject's (delta, D) stratum fit.
pub fn kappa_v_hat(
    propensity_fit: &LogisticFit,
    projection_fits: &ProjectionFits,
    dataset: &Dataset,
) -> Result<WeightSet> {
    let mut values = Vec::with_capacity(dataset.n());
    for r in &dataset.records {
        let psi = propensity_fit.predict_prob(&r.covariates)?;
        if psi <= PROB_CLAMP || psi >= 1.0 - PROB_CLAMP {
            return Err(Error::DegeneratePropensity { id: r.id.clone() });
        }
        let v_hat = projection_fits.predict(r)?;
        let d = r.treatment as f64;
        values.push(1.0 - d * (1.0 - v_hat) / (1.0 - psi) - (1.0 - d) * v_hat / psi);
    }
    Ok(WeightSet {
        values,
        method: WeightMethod::KappaV,
        propensity_fit: Some(propensity_fit.clone()),
        projection_fits: Some(projection_fits.clone()),
        truncation_interval: None,
    })
}

/// Clamps kappa_v weights into `interval` (default [0.01, 0.99]).
pub fn truncate_weights(weights: &WeightSet, interval: (f64, f64)) -> Result<WeightSet> {
    let (lo, hi) = interval;
    if !(0.0 < lo && lo < hi && hi < 1.0) {
        return Err(Error::BadTruncationInterval { lo, hi });
    }
    if weights.method != WeightMethod::KappaV {
        return Err(Error::Config(
            "truncation applies to kappa_v weights only".into(),
        ));
    }
    Ok(WeightSet {
        values: weights.values.iter().map(|w| w.clamp(lo, hi)).collect(),
        method: WeightMethod::KappaVTr,
        propensity_fit: weights.propensity_fit.clone(),
        projection_fits: weights.projection_fits.clone(),
        truncation_interval: Some(interval),
    })
}

pub const DEFAULT_TRUNCATION: (f64, f64) = (0.01, 0.99);

/// Mean weight; with g = 1 in the Abadie identity this estimates the
/// complier proportion P(D_1 > D_0).
pub fn complier_proportion(weights: &WeightSet) -> Result<f64> {
    if weights.values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(weights.values.iter().sum::<f64>() / weights.values.len() as f64)
}
