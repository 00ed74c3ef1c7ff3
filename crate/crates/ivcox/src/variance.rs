//! Variance estimation: nonparametric bootstrap with deterministic retry
//! semantics and a robust MAD scale, plus the analytic plug-in sandwich that
//! propagates first-stage estimation error through the weights.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{build_counting_view, CountingView, Dataset};
use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::phfit::{event_sums, FitOptions};
use crate::pipeline::Pipeline;
use crate::weights::{WeightMethod, WeightSet};

pub const BOOTSTRAP_NOISE_SD: f64 = 1e-5;
pub const MAD_SCALE: f64 = 1.4826;
pub const FD_STEP: f64 = 1e-6;

/// A covariance estimate for beta-hat plus the evidence behind it.
#[derive(Debug, Clone)]
pub struct VarianceEstimate {
    /// "bootstrap" or "analytic".
    pub method: String,
    pub cov: DMatrix<f64>,
    /// Componentwise robust SE 1.4826 * MAD of the replicates; empty for
    /// the analytic method.
    pub se_mad: Vec<f64>,
    /// Converged replicate coefficient vectors, in attempt order.
    pub replicates: Vec<DVector<f64>>,
    pub requested: usize,
    pub attempted: usize,
    pub converged: usize,
}

impl VarianceEstimate {
    /// Standard errors from the covariance diagonal.
    pub fn se(&self) -> Vec<f64> {
        (0..self.cov.nrows())
            .map(|j| self.cov[(j, j)].max(0.0).sqrt())
            .collect()
    }
}

fn median(sorted: &[f64]) -> f64 {
    let m = sorted.len();
    if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    }
}

/// Componentwise 1.4826 * median absolute deviation of the replicates.
pub fn mad_se(replicates: &[DVector<f64>]) -> Vec<f64> {
    if replicates.is_empty() {
        return Vec::new();
    }
    let d = replicates[0].len();
    (0..d)
        .map(|j| {
            let mut vals: Vec<f64> = replicates.iter().map(|b| b[j]).collect();
            vals.sort_by(f64::total_cmp);
            let med = median(&vals);
            let mut dev: Vec<f64> = vals.iter().map(|v| (v - med).abs()).collect();
            dev.sort_by(f64::total_cmp);
            MAD_SCALE * median(&dev)
        })
        .collect()
}

fn empirical_cov(replicates: &[DVector<f64>]) -> DMatrix<f64> {
    let b = replicates.len();
    let d = replicates.first().map_or(0, |r| r.len());
    let mut cov = DMatrix::zeros(d, d);
    if b < 2 {
        return cov;
    }
    let mut mean = DVector::zeros(d);
    for r in replicates {
        mean += r;
    }
    mean /= b as f64;
    for r in replicates {
        let c = r - &mean;
        cov.ger(1.0 / (b as f64 - 1.0), &c, &c, 1.0);
    }
    cov
}

/// Bootstrap configuration. Replicate seeds are derived from `seed` and the
/// attempt index, so results are identical whether or not the parallel
/// backend is used.
#[derive(Debug, Clone, Copy)]
pub struct BootstrapOptions {
    pub b: usize,
    pub seed: u64,
    pub parallel: bool,
    /// Event cause in competing-risks mode.
    pub cause: Option<u32>,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            b: 200,
            seed: 0,
            parallel: true,
            cause: None,
        }
    }
}

fn resample(
    dataset: &Dataset,
    oracle: Option<&[bool]>,
    seed: u64,
    attempt: usize,
) -> Result<(Dataset, Option<Vec<bool>>)> {
    let n = dataset.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt as u64 + 1);
    let noise = Normal::new(0.0, BOOTSTRAP_NOISE_SD).expect("valid sd");
    let mut records = Vec::with_capacity(n);
    let mut labels = oracle.map(|_| Vec::with_capacity(n));
    for i in 0..n {
        let idx = rng.random_range(0..n);
        let mut r = dataset.records[idx].clone();
        r.id = format!("b{attempt}_{i}");
        // Jitter breaks the event-time ties that resampling with
        // replacement necessarily creates.
        let floor = r.entry.unwrap_or(0.0);
        let jittered = r.time + noise.sample(&mut rng);
        if jittered > floor {
            r.time = jittered;
        }
        if let (Some(events), Some((lo, hi))) = (r.event_times.as_mut(), r.window) {
            for t in events.iter_mut() {
                let tj = *t + noise.sample(&mut rng);
                if tj > lo && tj <= hi {
                    *t = tj;
                }
            }
            events.sort_by(f64::total_cmp);
        }
        records.push(r);
        if let (Some(ls), Some(src)) = (labels.as_mut(), oracle) {
            ls.push(src[idx]);
        }
    }
    let ds = Dataset::new(records, dataset.mode)?;
    Ok((ds, labels))
}

/// Bootstraps the full pipeline. Draws replicates until `b` of them
/// converge, up to `3 * b` attempts; a replicate whose refit fails for any
/// reason counts as an attempt and is discarded. The first `b` converged
/// replicates in attempt order are kept, so the estimate does not depend on
/// scheduling.
pub fn bootstrap_variance(
    dataset: &Dataset,
    pipeline: &Pipeline,
    oracle: Option<&[bool]>,
    opts: &BootstrapOptions,
) -> Result<VarianceEstimate> {
    if opts.b < 2 {
        return Err(Error::Config("bootstrap needs at least 2 replicates".into()));
    }
    let max_attempts = 3 * opts.b;
    let mut replicates: Vec<DVector<f64>> = Vec::with_capacity(opts.b);
    let mut attempted = 0;
    while replicates.len() < opts.b && attempted < max_attempts {
        let block = (opts.b - replicates.len()).min(max_attempts - attempted);
        let results = map_indexed(block, opts.parallel, |k| {
            let attempt = attempted + k;
            resample(dataset, oracle, opts.seed, attempt)
                .and_then(|(ds, labels)| pipeline.run(&ds, opts.cause, labels.as_deref()))
                .ok()
                .filter(|run| run.fit.converged)
                .map(|run| run.fit.beta)
        });
        attempted += block;
        replicates.extend(results.into_iter().flatten());
    }
    let converged = replicates.len();
    let estimate = VarianceEstimate {
        method: "bootstrap".into(),
        cov: empirical_cov(&replicates),
        se_mad: mad_se(&replicates),
        replicates,
        requested: opts.b,
        attempted,
        converged,
    };
    if converged < opts.b {
        return Err(Error::InsufficientConvergence {
            requested: opts.b,
            converged,
            attempted,
            partial: Box::new(estimate),
        });
    }
    Ok(estimate)
}

/// Martingale-residual integrals b_i = int {Z_i - Ebar(t)} dM_i(t) under the
/// weighted Breslow baseline, plus the per-grid Ebar and baseline increments.
struct ResidualParts {
    b: Vec<DVector<f64>>,
    ebar: Vec<DVector<f64>>,
    dlam: Vec<f64>,
    /// Weighted event mass sum_j w_j dN_j(t_k) per grid point.
    event_mass: Vec<f64>,
    /// Guarded weighted S0 per grid point.
    s0: Vec<f64>,
}

fn residual_parts(view: &CountingView, weights: &[f64], beta: &DVector<f64>) -> ResidualParts {
    let d = view.dim;
    let m = view.grid.len();
    let n = view.n();
    let sums = event_sums(view, weights, beta, false);
    let nu = FitOptions::default().nu;

    let mut event_mass = vec![0.0; m];
    for &(gi, si) in &view.events {
        event_mass[gi] += weights[si];
    }
    let mut ebar = Vec::with_capacity(m);
    let mut dlam = vec![0.0; m];
    let mut s0g = vec![0.0; m];
    for k in 0..m {
        let s0 = if sums.s0[k].abs() > nu { sums.s0[k] } else { nu };
        ebar.push(&sums.s1[k] / s0);
        dlam[k] = event_mass[k] / s0;
        s0g[k] = s0;
    }

    let mut b = vec![DVector::zeros(d); n];
    for &(gi, si) in &view.events {
        b[si] += &view.subjects[si].z - &ebar[gi];
    }
    for (i, s) in view.subjects.iter().enumerate() {
        let haz = beta.dot(&s.z).exp();
        for k in 0..m {
            let t = view.grid[k];
            if s.entry < t && t <= s.exit {
                b[i].axpy(-haz * dlam[k], &(&s.z - &ebar[k]), 1.0);
            }
        }
    }
    ResidualParts {
        b,
        ebar,
        dlam,
        event_mass,
        s0: s0g,
    }
}

fn kappa_with_alpha(dataset: &Dataset, alpha: &DVector<f64>) -> Vec<f64> {
    dataset
        .records
        .iter()
        .map(|r| {
            let mut eta = alpha[0];
            for (j, &x) in r.covariates.iter().enumerate() {
                eta += alpha[j + 1] * x;
            }
            let psi = 1.0 / (1.0 + (-eta).exp());
            let d = r.treatment as f64;
            let v = r.instrument as f64;
            1.0 - d * (1.0 - v) / (1.0 - psi) - (1.0 - d) * v / psi
        })
        .collect()
}

/// Analytic plug-in covariance. For kappa weights the sandwich includes the
/// first-stage correction terms; for unit and oracle weights it is the plain
/// weighted PH sandwich. Not available for the projected weights, whose
/// nuisance fit has no tractable plug-in here -- use the bootstrap.
pub fn analytic_variance(
    dataset: &Dataset,
    weights: &WeightSet,
    beta: &DVector<f64>,
    cause: Option<u32>,
) -> Result<VarianceEstimate> {
    if matches!(weights.method, WeightMethod::KappaV | WeightMethod::KappaVTr) {
        return Err(Error::Config(
            "analytic variance is implemented for kappa, unit, and oracle weights; \
             use the bootstrap for projected weights"
                .into(),
        ));
    }
    let view = build_counting_view(dataset, cause)?;
    let d = view.dim;
    let n = view.n();
    let nf = n as f64;
    let w = &weights.values;

    // Curvature phi_n = (1/n) sum over events of w_i { S2/S0 - (S1/S0)^x2 }.
    let sums = event_sums(&view, w, beta, true);
    let nu = FitOptions::default().nu;
    let mut phi = DMatrix::zeros(d, d);
    for &(gi, si) in &view.events {
        let s0 = if sums.s0[gi].abs() > nu { sums.s0[gi] } else { nu };
        let eb = &sums.s1[gi] / s0;
        let mut v = &sums.s2[gi] / s0;
        v.ger(-1.0, &eb, &eb, 1.0);
        phi += w[si] / nf * v;
    }
    let phi_inv = phi
        .clone()
        .try_inverse()
        .ok_or(Error::SingularCurvature)?;

    let parts = residual_parts(&view, w, beta);

    // First-stage correction: the weights depend on alpha-hat both directly
    // (kappa) and through the weighted risk-set average Ebar.
    let correction: Option<(DMatrix<f64>, Vec<DVector<f64>>)> = match &weights.propensity_fit {
        Some(prop) => {
            let q = prop.q();
            // G = (1/n) sum_j b_j D_phi,j^T with
            // D_phi = dkappa/dalpha = [-D(1-V) psi/(1-psi) + (1-D)V(1-psi)/psi] (1, X)^T.
            let mut g = DMatrix::zeros(d, q);
            for (j, r) in dataset.records.iter().enumerate() {
                let psi = prop.predict_prob(&r.covariates)?;
                let dd = r.treatment as f64;
                let v = r.instrument as f64;
                let scale = -dd * (1.0 - v) * psi / (1.0 - psi) + (1.0 - dd) * v * (1.0 - psi) / psi;
                let mut xi = DVector::zeros(q);
                xi[0] = 1.0;
                for (k, &x) in r.covariates.iter().enumerate() {
                    xi[k + 1] = x;
                }
                g.ger(scale / nf, &parts.b[j], &xi, 1.0);
            }
            // H = (1/n) sum_j kappa_j int D_ebar(t) dM_j(t), with D_ebar by
            // central differences in alpha. Under the weighted Breslow
            // baseline sum_j kappa_j dM_j vanishes at every event time, so
            // this evaluates to zero up to rounding; it is kept so the
            // decomposition stays faithful if the baseline changes.
            let mut h = DMatrix::zeros(d, q);
            for k in 0..q {
                let mut up = prop.alpha.clone();
                up[k] += FD_STEP;
                let mut dn = prop.alpha.clone();
                dn[k] -= FD_STEP;
                let w_up = kappa_with_alpha(dataset, &up);
                let w_dn = kappa_with_alpha(dataset, &dn);
                let p_up = residual_parts(&view, &w_up, beta);
                let p_dn = residual_parts(&view, &w_dn, beta);
                for gi in 0..view.grid.len() {
                    let d_ebar = (&p_up.ebar[gi] - &p_dn.ebar[gi]) / (2.0 * FD_STEP);
                    // Aggregated residual sum_j kappa_j dM_j(t_k): weighted
                    // event mass minus the compensator S0(t_k) dLambda(t_k).
                    let dm = parts.event_mass[gi] - parts.s0[gi] * parts.dlam[gi];
                    h.column_mut(k).axpy(dm / nf, &d_ebar, 1.0);
                }
            }
            let infl: Result<Vec<DVector<f64>>> = dataset
                .records
                .iter()
                .map(|r| prop.influence_alpha(r.instrument as f64, &r.covariates))
                .collect();
            Some(((g - h), infl?))
        }
        None => None,
    };

    let mut omega = DMatrix::zeros(d, d);
    for i in 0..n {
        let mut psi_i = w[i] * &parts.b[i];
        if let Some((gh, infl)) = &correction {
            psi_i += gh * &infl[i];
        }
        let v = &phi_inv * psi_i;
        omega.ger(1.0 / nf, &v, &v, 1.0);
    }
    let cov = omega / nf;
    Ok(VarianceEstimate {
        method: "analytic".into(),
        cov,
        se_mad: Vec::new(),
        replicates: Vec::new(),
        requested: 0,
        attempted: 0,
        converged: 0,
    })
}
