//! Complier causal hazard ratio estimation with a binary instrumental variable.
//!
//! The estimator weights the Cox partial-likelihood score with Abadie-type
//! compliance weights built from a first-stage logistic regression of the
//! instrument on covariates. Three weight schemes are provided (the signed
//! `kappa` weight, its projection `kappa_v`, and the truncated `kappa_v_tr`),
//! together with bootstrap and analytic plug-in variance estimation, survival
//! extensions (left truncation, competing risks, recurrent events), and a
//! seeded Monte Carlo harness.

pub mod cli;
pub mod data;
pub mod error;
pub mod logistic;
pub mod parallel;
pub mod phfit;
pub mod pipeline;
pub mod simgen;
pub mod variance;
pub mod weights;

pub use data::{CountingView, Dataset, Mode, SubjectRecord, TiePolicy};
pub use error::Error;
pub use logistic::LogisticFit;
pub use phfit::{BaselineHazard, FitOptions, PhFit};
pub use pipeline::{Pipeline, PipelineFit};
pub use simgen::{OracleDataset, SimConfig};
pub use variance::VarianceEstimate;
pub use weights::{DesignPolicy, WeightMethod, WeightSet};
