//! Maximum-likelihood logistic regression for the instrument propensity and
//! for the per-stratum projection models, with the per-subject influence
//! functions needed by the analytic variance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-12;
/// The fit is declared separated when the log likelihood ends this close to
/// its supremum of zero (every observation classified perfectly).
const SEPARATION_LL_TOL: f64 = 1e-6;
const SCORE_TOL: f64 = 1e-8;
const MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 20;

/// Fitted logistic regression: coefficients, observed information, and
/// convergence diagnostics.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    /// (alpha_1, alpha_2^T)^T with the intercept first.
    pub alpha: DVector<f64>,
    /// Observed information X^T W X at alpha (unscaled by n).
    pub info: DMatrix<f64>,
    pub converged: bool,
    /// Sup-norm of the mean score (1/n) sum_i (v_i - psi_i) x_i at alpha.
    pub score_norm: f64,
    pub iterations: usize,
    pub design_spec: String,
    pub n: usize,
    inv_info: DMatrix<f64>,
}

fn expit(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn rcond(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if max == 0.0 {
        0.0
    } else {
        min / max
    }
}

fn log_likelihood(outcomes: &[f64], eta: &DVector<f64>, weights: Option<&[f64]>) -> f64 {
    let mut ll = 0.0;
    for (i, &y) in outcomes.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let p = clamp_prob(expit(eta[i]));
        ll += w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    ll
}

/// Newton-Raphson logistic regression. `design` must carry a leading
/// intercept column; `weights`, when given, are per-observation inclusion
/// weights (used by the finite-difference oracle and stratum fallbacks).
pub fn fit_logistic_weighted(
    outcomes: &[f64],
    design: &DMatrix<f64>,
    weights: Option<&[f64]>,
    design_spec: &str,
) -> Result<LogisticFit> {
    let n = outcomes.len();
    if design.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: design.nrows(),
        });
    }
    let q = design.ncols();
    let mut alpha = DVector::zeros(q);
    let mut eta = design * &alpha;
    let mut ll = log_likelihood(outcomes, &eta, weights);
    let mut score_norm = f64::INFINITY;
    let mut info = DMatrix::zeros(q, q);
    let mut iterations = 0;

    for iter in 0..MAX_ITER {
        iterations = iter + 1;
        let mut grad = DVector::zeros(q);
        info.fill(0.0);
        for i in 0..n {
            let w = weights.map_or(1.0, |w| w[i]);
            let p = clamp_prob(expit(eta[i]));
            let xi = design.row(i).transpose();
            grad.axpy(w * (outcomes[i] - p), &xi, 1.0);
            info.ger(w * p * (1.0 - p), &xi, &xi, 1.0);
        }
        score_norm = grad.amax() / n as f64;
        if score_norm < SCORE_TOL {
            break;
        }
        let rc = rcond(&info);
        if rc < 1e-12 {
            return Err(Error::Singular { rcond: rc });
        }
        let step = info
            .clone()
            .lu()
            .solve(&grad)
            .ok_or(Error::Singular { rcond: rc })?;
        // Step-halving keeps the log-likelihood nondecreasing.
        let mut factor = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let trial = &alpha + factor * &step;
            let trial_eta = design * &trial;
            let trial_ll = log_likelihood(outcomes, &trial_eta, weights);
            if trial_ll >= ll - 1e-12 {
                alpha = trial;
                eta = trial_eta;
                ll = trial_ll;
                accepted = true;
                break;
            }
            factor *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    // A log likelihood at (numerically) zero means every observation is
    // fitted perfectly: the MLE is at infinity and the score only flattened
    // out because the probabilities saturated. Large |eta| alone is not
    // enough evidence, since unbounded regressors legitimately produce
    // extreme linear predictors for a few subjects.
    if ll > -SEPARATION_LL_TOL {
        return Err(Error::Separation {
            threshold: SEPARATION_LL_TOL,
        });
    }
    let converged = score_norm < SCORE_TOL;
    let rc = rcond(&info);
    if rc < 1e-12 {
        return Err(Error::Singular { rcond: rc });
    }
    let inv_info = info
        .clone()
        .lu()
        .try_inverse()
        .ok_or(Error::Singular { rcond: rc })?;
    Ok(LogisticFit {
        alpha,
        info,
        converged,
        score_norm,
        iterations,
        design_spec: design_spec.to_string(),
        n,
        inv_info,
    })
}

/// Unweighted maximum-likelihood fit of V on the design matrix.
pub fn fit_logistic(outcomes: &[f64], design: &DMatrix<f64>) -> Result<LogisticFit> {
    fit_logistic_weighted(outcomes, design, None, "intercept + regressors")
}

impl LogisticFit {
    pub fn q(&self) -> usize {
        self.alpha.len()
    }

    /// Linear predictor for a regressor vector excluding the intercept.
    pub fn linear_predictor(&self, x: &[f64]) -> Result<f64> {
        if x.len() + 1 != self.alpha.len() {
            return Err(Error::DimensionMismatch {
                expected: self.alpha.len() - 1,
                got: x.len(),
            });
        }
        let mut eta = self.alpha[0];
        for (j, &xj) in x.iter().enumerate() {
            eta += self.alpha[j + 1] * xj;
        }
        Ok(eta)
    }

    /// psi(alpha, x), clamped to [1e-12, 1 - 1e-12].
    pub fn predict_prob(&self, x: &[f64]) -> Result<f64> {
        Ok(clamp_prob(expit(self.linear_predictor(x)?)))
    }

    /// MLE influence contribution n * info^{-1} (v - psi(x)) (1, x^T)^T,
    /// scaled so that n^{1/2}(alpha_hat - alpha_0) is approximately
    /// n^{-1/2} sum_i I_alpha(O_i).
    pub fn influence_alpha(&self, v: f64, x: &[f64]) -> Result<DVector<f64>> {
        let psi = self.predict_prob(x)?;
        let mut xi = DVector::zeros(self.alpha.len());
        xi[0] = 1.0;
        for (j, &xj) in x.iter().enumerate() {
            xi[j + 1] = xj;
        }
        Ok(self.n as f64 * (&self.inv_info * xi) * (v - psi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intercept_only(n: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, 1, 1.0)
    }

    #[test]
    fn symmetric_outcomes_give_zero_intercept() {
        let fit = fit_logistic(&[1.0, 0.0, 1.0, 0.0], &intercept_only(4)).unwrap();
        assert!(fit.converged);
        assert_relative_eq!(fit.alpha[0], 0.0, epsilon = 1e-8);
    }

    #[test]
    fn three_quarters_gives_log3() {
        let fit = fit_logistic(&[1.0, 1.0, 1.0, 0.0], &intercept_only(4)).unwrap();
        assert_relative_eq!(fit.alpha[0], 3.0_f64.ln(), epsilon = 1e-7);
        assert_relative_eq!(fit.predict_prob(&[]).unwrap(), 0.75, epsilon = 1e-8);
    }

    #[test]
    fn perfect_separation_errors() {
        let design = DMatrix::from_row_slice(4, 2, &[1.0, -1.0, 1.0, -1.0, 1.0, 1.0, 1.0, 1.0]);
        let err = fit_logistic(&[0.0, 0.0, 1.0, 1.0], &design).unwrap_err();
        assert!(matches!(err, Error::Separation { .. }));
    }

    #[test]
    fn predict_prob_examples() {
        let mut fit = fit_logistic(&[1.0, 0.0], &intercept_only(2)).unwrap();
        fit.alpha = DVector::from_vec(vec![0.0, 1.0]);
        assert_relative_eq!(fit.predict_prob(&[0.0]).unwrap(), 0.5);
        assert!(fit.predict_prob(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn influence_sums_to_zero_at_mle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200;
        let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let vs: Vec<f64> = xs
            .iter()
            .map(|&x| {
                let p = 1.0 / (1.0 + (-(0.3 + 0.8 * x)).exp());
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let fit = fit_logistic(&vs, &design).unwrap();
        assert!(fit.converged);
        let mut total = DVector::zeros(2);
        for i in 0..n {
            total += fit.influence_alpha(vs[i], &[xs[i]]).unwrap();
        }
        assert!(total.amax() / (n as f64) < 1e-6);
    }

    #[test]
    fn influence_matches_finite_difference_refit() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 200;
        let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let vs: Vec<f64> = xs
            .iter()
            .map(|&x| {
                let p = 1.0 / (1.0 + (-(0.2 + x)).exp());
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let fit = fit_logistic(&vs, &design).unwrap();
        let eps = 1e-5;
        let target = 5;
        let mut w = vec![1.0; n];
        w[target] += eps;
        let up = fit_logistic_weighted(&vs, &design, Some(&w), "fd").unwrap();
        w[target] -= 2.0 * eps;
        let dn = fit_logistic_weighted(&vs, &design, Some(&w), "fd").unwrap();
        let fd = (up.alpha - dn.alpha) / (2.0 * eps);
        let infl = fit.influence_alpha(vs[target], &[xs[target]]).unwrap() / n as f64;
        for j in 0..2 {
            assert_relative_eq!(fd[j], infl[j], max_relative = 1e-3, epsilon = 1e-9);
        }
    }

    #[test]
    fn recovers_truth_at_large_n() {
        // Average the MLE over independent replications; any systematic
        // bias would show up against the replication-averaged SE.
        let n = 20_000;
        let reps = 10;
        let truth = [0.0, 1.0];
        let mut mean = [0.0, 0.0];
        let mut se = [0.0, 0.0];
        for seed in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let vs: Vec<f64> = xs
                .iter()
                .map(|&x| {
                    let p = 1.0 / (1.0 + (-(truth[0] + truth[1] * x)).exp());
                    if rng.random::<f64>() < p {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
            let fit = fit_logistic(&vs, &design).unwrap();
            let inv = fit.info.clone().lu().try_inverse().unwrap();
            for j in 0..2 {
                mean[j] += fit.alpha[j] / reps as f64;
                se[j] += inv[(j, j)].sqrt() / reps as f64;
            }
        }
        for j in 0..2 {
            let tol = 3.0 * se[j] / (reps as f64).sqrt();
            assert!(
                (mean[j] - truth[j]).abs() < tol,
                "mean alpha[{j}] = {} vs {}",
                mean[j],
                truth[j]
            );
        }
    }
}
