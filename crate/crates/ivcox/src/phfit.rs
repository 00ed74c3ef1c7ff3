//! Weighted proportional-hazards engine: weighted risk-set sums, the
//! estimating function U_{n,kappa}, the truncated objective C-bar, the
//! multi-start fitter (Newton for nonnegative weights, BFGS on the truncated
//! objective for signed weights), the Breslow baseline, and objective/score
//! surface slices.

use nalgebra::{DMatrix, DVector};

use crate::data::CountingView;
use crate::error::{Error, Result};
use crate::weights::{WeightMethod, WeightSet};

/// Fitting options. `nu` truncates S0 in the objective; `tol` certifies the
/// root against the sup-norm of U_{n,kappa} (with the 1/sqrt(n) factor).
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub nu: f64,
    pub tol: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            nu: 1e-4,
            tol: 0.05,
            grad_tol: 1e-8,
            max_iter: 500,
        }
    }
}

/// Outcome of one optimization start.
#[derive(Debug, Clone)]
pub struct StartOutcome {
    pub start: DVector<f64>,
    pub beta: DVector<f64>,
    pub objective: f64,
    pub score_norm: f64,
    pub certified: bool,
}

/// Fitted coefficients and diagnostics.
#[derive(Debug, Clone)]
pub struct PhFit {
    /// beta_d first, then beta_x.
    pub beta: DVector<f64>,
    /// C-bar value at beta.
    pub objective: f64,
    /// Sup-norm of U_{n,kappa}(beta), i.e. with the 1/sqrt(n) factor.
    pub score_norm: f64,
    /// Sup-norm of the raw (unnormalized) estimating sum.
    pub score_norm_unnormalized: f64,
    pub converged: bool,
    pub starts_tried: Vec<StartOutcome>,
    pub method_tag: WeightMethod,
    pub nu: f64,
}

/// Step-function baseline hazard: increments at the distinct event times.
/// Signed weights may produce negative increments; only the variance plug-in
/// consumes those.
#[derive(Debug, Clone)]
pub struct BaselineHazard {
    pub times: Vec<f64>,
    pub increments: Vec<f64>,
}

impl BaselineHazard {
    /// Cumulative hazard at t (right-continuous step function).
    pub fn cumulative(&self, t: f64) -> f64 {
        self.times
            .iter()
            .zip(&self.increments)
            .take_while(|(&tj, _)| tj <= t)
            .map(|(_, &d)| d)
            .sum()
    }

    pub fn has_negative_increment(&self) -> bool {
        self.increments.iter().any(|&d| d < 0.0)
    }
}

/// Weighted risk-set sums S0, S1, S2 at every grid time, aligned with
/// `view.grid`.
pub(crate) struct EventSums {
    pub s0: Vec<f64>,
    pub s1: Vec<DVector<f64>>,
    pub s2: Vec<DMatrix<f64>>,
}

/// One descending sweep over the event grid accumulates the at-risk sums:
/// a subject is at risk at t iff entry < t <= exit.
pub(crate) fn event_sums(
    view: &CountingView,
    weights: &[f64],
    beta: &DVector<f64>,
    want_s2: bool,
) -> EventSums {
    let d = view.dim;
    let m = view.grid.len();
    let n = view.n();

    let terms: Vec<f64> = (0..n)
        .map(|i| weights[i] * beta.dot(&view.subjects[i].z).exp())
        .collect();

    let mut by_exit: Vec<usize> = (0..n).collect();
    by_exit.sort_by(|&a, &b| view.subjects[b].exit.total_cmp(&view.subjects[a].exit));
    let mut by_entry: Vec<usize> = (0..n).collect();
    by_entry.sort_by(|&a, &b| view.subjects[b].entry.total_cmp(&view.subjects[a].entry));

    let mut s0_acc = 0.0;
    let mut s1_acc = DVector::zeros(d);
    let mut s2_acc = DMatrix::zeros(d, d);
    let mut s0 = vec![0.0; m];
    let mut s1 = vec![DVector::zeros(d); m];
    let mut s2 = if want_s2 {
        vec![DMatrix::zeros(d, d); m]
    } else {
        Vec::new()
    };

    let mut add = 0; // next in by_exit to include
    let mut rem = 0; // next in by_entry to exclude
    for gi in (0..m).rev() {
        let t = view.grid[gi];
        while add < n && view.subjects[by_exit[add]].exit >= t {
            let i = by_exit[add];
            s0_acc += terms[i];
            s1_acc.axpy(terms[i], &view.subjects[i].z, 1.0);
            if want_s2 {
                s2_acc.ger(terms[i], &view.subjects[i].z, &view.subjects[i].z, 1.0);
            }
            add += 1;
        }
        while rem < n && view.subjects[by_entry[rem]].entry >= t {
            let i = by_entry[rem];
            s0_acc -= terms[i];
            s1_acc.axpy(-terms[i], &view.subjects[i].z, 1.0);
            if want_s2 {
                s2_acc.ger(-terms[i], &view.subjects[i].z, &view.subjects[i].z, 1.0);
            }
            rem += 1;
        }
        s0[gi] = s0_acc;
        s1[gi] = s1_acc.clone();
        if want_s2 {
            s2[gi] = s2_acc.clone();
        }
    }

    EventSums { s0, s1, s2 }
}

/// Exact weighted risk-set sums (S0, S1, S2) at a single time t.
pub fn risk_sums(
    beta: &DVector<f64>,
    t: f64,
    weights: &WeightSet,
    view: &CountingView,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let d = view.dim;
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(d);
    let mut s2 = DMatrix::zeros(d, d);
    for (i, s) in view.subjects.iter().enumerate() {
        if s.entry < t && t <= s.exit {
            let term = weights.values[i] * beta.dot(&s.z).exp();
            s0 += term;
            s1.axpy(term, &s.z, 1.0);
            s2.ger(term, &s.z, &s.z, 1.0);
        }
    }
    (s0, s1, s2)
}

/// The truncated objective C-bar(beta) of the weighted partial likelihood.
pub fn objective(beta: &DVector<f64>, weights: &WeightSet, view: &CountingView, nu: f64) -> f64 {
    let sums = event_sums(view, &weights.values, beta, false);
    let n = view.n() as f64;
    let mut c = 0.0;
    for &(gi, si) in &view.events {
        let z = &view.subjects[si].z;
        c += weights.values[si] * (beta.dot(z) - sums.s0[gi].max(nu).ln());
    }
    c / n
}

/// The estimating function U_{n,kappa}(beta) (with the 1/sqrt(n) factor).
/// Errors with `DegenerateRiskSet` when some event time has |S0| < nu while
/// negative weights are present.
pub fn score(beta: &DVector<f64>, weights: &WeightSet, view: &CountingView) -> Result<DVector<f64>> {
    let u = score_unnormalized(beta, weights, view)?;
    Ok(u / (view.n() as f64).sqrt())
}

/// The raw estimating sum without the 1/sqrt(n) factor.
pub fn score_unnormalized(
    beta: &DVector<f64>,
    weights: &WeightSet,
    view: &CountingView,
) -> Result<DVector<f64>> {
    let nu = FitOptions::default().nu;
    let sums = event_sums(view, &weights.values, beta, false);
    let negative = weights.has_negative();
    let mut u = DVector::zeros(view.dim);
    for &(gi, si) in &view.events {
        let s0 = sums.s0[gi];
        if s0 == 0.0 || (negative && s0.abs() < nu) {
            return Err(Error::DegenerateRiskSet {
                time: view.grid[gi],
                nu,
            });
        }
        let w = weights.values[si];
        u.axpy(w, &view.subjects[si].z, 1.0);
        u.axpy(-w / s0, &sums.s1[gi], 1.0);
    }
    Ok(u)
}

/// Gradient of C-bar: equals the raw score divided by n except where the
/// nu-truncation is active (there the log term is locally constant).
pub fn objective_gradient(
    beta: &DVector<f64>,
    weights: &WeightSet,
    view: &CountingView,
    nu: f64,
) -> DVector<f64> {
    let sums = event_sums(view, &weights.values, beta, false);
    let mut g = DVector::zeros(view.dim);
    for &(gi, si) in &view.events {
        let w = weights.values[si];
        g.axpy(w, &view.subjects[si].z, 1.0);
        let s0 = sums.s0[gi];
        if s0 > nu {
            g.axpy(-w / s0, &sums.s1[gi], 1.0);
        }
    }
    g / view.n() as f64
}

fn sup_norms(beta: &DVector<f64>, weights: &WeightSet, view: &CountingView) -> (f64, f64) {
    match score_unnormalized(beta, weights, view) {
        Ok(u) => {
            let raw = u.amax();
            (raw / (view.n() as f64).sqrt(), raw)
        }
        Err(_) => (f64::INFINITY, f64::INFINITY),
    }
}

/// Newton-Raphson for nonnegative weights: the weighted log partial
/// likelihood is maximized directly with step-halving.
fn newton_fit(
    view: &CountingView,
    weights: &[f64],
    opts: &FitOptions,
    start: &DVector<f64>,
) -> DVector<f64> {
    let d = view.dim;
    let n = view.n() as f64;
    let mut beta = start.clone();

    let eval = |b: &DVector<f64>| -> (f64, DVector<f64>, DMatrix<f64>) {
        let sums = event_sums(view, weights, b, true);
        let mut ll = 0.0;
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        for &(gi, si) in &view.events {
            let w = weights[si];
            if w == 0.0 {
                continue;
            }
            let s0 = sums.s0[gi].max(opts.nu);
            let z = &view.subjects[si].z;
            ll += w * (b.dot(z) - s0.ln());
            let e = &sums.s1[gi] / s0;
            grad.axpy(w, z, 1.0);
            grad.axpy(-w, &e, 1.0);
            // V = S2/S0 - E E^T
            let mut v = &sums.s2[gi] / s0;
            v.ger(-1.0, &e, &e, 1.0);
            hess += w * v;
        }
        (ll, grad, hess)
    };

    let (mut ll, mut grad, mut hess) = eval(&beta);
    for _ in 0..opts.max_iter {
        if grad.amax() / n.max(1.0) < opts.grad_tol {
            break;
        }
        let Some(step) = hess.clone().lu().solve(&grad) else {
            break;
        };
        let mut factor = 1.0;
        let mut moved = false;
        for _ in 0..20 {
            let trial = &beta + factor * &step;
            let (tll, tgrad, thess) = eval(&trial);
            if tll >= ll - 1e-12 {
                beta = trial;
                ll = tll;
                grad = tgrad;
                hess = thess;
                moved = true;
                break;
            }
            factor *= 0.5;
        }
        if !moved {
            break;
        }
    }
    beta
}

/// BFGS maximization of C-bar with the truncation-aware gradient.
fn bfgs_max(
    view: &CountingView,
    weights: &WeightSet,
    opts: &FitOptions,
    start: &DVector<f64>,
) -> DVector<f64> {
    let d = view.dim;
    let f = |b: &DVector<f64>| objective(b, weights, view, opts.nu);
    let g = |b: &DVector<f64>| objective_gradient(b, weights, view, opts.nu);

    let mut x = start.clone();
    let mut fx = f(&x);
    let mut gx = g(&x);
    let mut h = DMatrix::<f64>::identity(d, d);

    for _ in 0..opts.max_iter {
        if gx.amax() < 1e-9 {
            break;
        }
        let mut dir = &h * &gx; // ascent direction
        if gx.dot(&dir) <= 0.0 {
            h = DMatrix::identity(d, d);
            dir = gx.clone();
        }
        // Backtracking Armijo line search.
        let slope = gx.dot(&dir);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xt = &x + t * &dir;
            let ft = f(&xt);
            if ft >= fx + 1e-4 * t * slope {
                accepted = Some((xt, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            break;
        };
        let g_new = g(&x_new);
        let s = &x_new - &x;
        let y = &g_new - &gx;
        let sy = s.dot(&y);
        // Curvature condition for an ascent problem: s.y < 0.
        if sy < -1e-14 {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            let mut hn = h.clone();
            hn.ger(rho * rho * yhy - rho, &s, &s, 1.0);
            hn.ger(-rho, &hy, &s, 1.0);
            hn.ger(-rho, &s, &hy, 1.0);
            h = hn;
        }
        let stalled = (f_new - fx).abs() < 1e-15 * (1.0 + fx.abs());
        x = x_new;
        fx = f_new;
        gx = g_new;
        if stalled {
            break;
        }
    }
    x
}

/// Fits beta. Nonnegative weights take the Newton path on the weighted
/// partial likelihood; signed weights maximize C-bar by BFGS from the three
/// starting points {naive, naive + 0.5, naive - 0.5} and the candidate with
/// the highest objective whose score sup-norm certifies is returned.
pub fn fit(view: &CountingView, weights: &WeightSet, opts: &FitOptions) -> Result<PhFit> {
    let d = view.dim;
    let zero = DVector::zeros(d);

    let degenerate = view.events.is_empty()
        || view
            .events
            .iter()
            .all(|&(_, si)| weights.values[si] == 0.0);
    if degenerate {
        let fit = PhFit {
            beta: zero.clone(),
            objective: 0.0,
            score_norm: 0.0,
            score_norm_unnormalized: 0.0,
            converged: false,
            starts_tried: Vec::new(),
            method_tag: weights.method,
            nu: opts.nu,
        };
        return Err(Error::NoConvergence {
            best_score_norm: f64::INFINITY,
            best: Box::new(fit),
        });
    }

    if !weights.has_negative() {
        let beta = newton_fit(view, &weights.values, opts, &zero);
        let (norm, raw) = sup_norms(&beta, weights, view);
        let obj = objective(&beta, weights, view, opts.nu);
        return Ok(PhFit {
            converged: norm <= opts.tol,
            starts_tried: vec![StartOutcome {
                start: zero,
                beta: beta.clone(),
                objective: obj,
                score_norm: norm,
                certified: norm <= opts.tol,
            }],
            beta,
            objective: obj,
            score_norm: norm,
            score_norm_unnormalized: raw,
            method_tag: weights.method,
            nu: opts.nu,
        });
    }

    // Signed weights: naive (unit-weight) estimate seeds the three starts.
    let naive = newton_fit(view, &vec![1.0; view.n()], opts, &zero);
    let offsets = [0.0, 0.5, -0.5];
    let mut outcomes = Vec::with_capacity(3);
    for off in offsets {
        let start = naive.map(|b| b + off);
        let beta = bfgs_max(view, weights, opts, &start);
        let (norm, _) = sup_norms(&beta, weights, view);
        let obj = objective(&beta, weights, view, opts.nu);
        outcomes.push(StartOutcome {
            start,
            beta,
            objective: obj,
            score_norm: norm,
            certified: norm <= opts.tol,
        });
    }

    let best_certified = outcomes
        .iter()
        .filter(|o| o.certified)
        .max_by(|a, b| a.objective.total_cmp(&b.objective))
        .cloned();

    match best_certified {
        Some(best) => {
            let (norm, raw) = sup_norms(&best.beta, weights, view);
            Ok(PhFit {
                beta: best.beta.clone(),
                objective: best.objective,
                score_norm: norm,
                score_norm_unnormalized: raw,
                converged: true,
                starts_tried: outcomes,
                method_tag: weights.method,
                nu: opts.nu,
            })
        }
        None => {
            let best = outcomes
                .iter()
                .min_by(|a, b| a.score_norm.total_cmp(&b.score_norm))
                .cloned()
                .expect("at least one start");
            let fit = PhFit {
                beta: best.beta.clone(),
                objective: best.objective,
                score_norm: best.score_norm,
                score_norm_unnormalized: best.score_norm * (view.n() as f64).sqrt(),
                converged: false,
                starts_tried: outcomes,
                method_tag: weights.method,
                nu: opts.nu,
            };
            Err(Error::NoConvergence {
                best_score_norm: best.score_norm,
                best: Box::new(fit),
            })
        }
    }
}

/// Weighted Breslow baseline: dLambda0(t_j) = sum_i kappa_i dN_i(t_j) / S0(t_j).
pub fn breslow(
    view: &CountingView,
    weights: &WeightSet,
    beta: &DVector<f64>,
) -> Result<BaselineHazard> {
    let nu = FitOptions::default().nu;
    let sums = event_sums(view, &weights.values, beta, false);
    let negative = weights.has_negative();
    let mut increments = vec![0.0; view.grid.len()];
    for &(gi, si) in &view.events {
        let s0 = sums.s0[gi];
        if s0 == 0.0 || (negative && s0.abs() < nu) {
            return Err(Error::DegenerateRiskSet {
                time: view.grid[gi],
                nu,
            });
        }
        increments[gi] += weights.values[si] / s0;
    }
    Ok(BaselineHazard {
        times: view.grid.clone(),
        increments,
    })
}

/// A 1-D slice of the objective and score surfaces along one coefficient.
#[derive(Debug, Clone)]
pub struct SurfaceRow {
    pub beta_axis: f64,
    pub objective: f64,
    pub score: Vec<f64>,
}

pub fn surface(
    view: &CountingView,
    weights: &WeightSet,
    axis: usize,
    grid: (f64, f64, usize),
    beta_fixed: &DVector<f64>,
    nu: f64,
) -> Result<Vec<SurfaceRow>> {
    let (lo, hi, steps) = grid;
    if axis >= view.dim {
        return Err(Error::Config(format!(
            "surface axis {axis} out of range for dimension {}",
            view.dim
        )));
    }
    if steps < 2 || !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(Error::Config("surface grid must be finite with steps >= 2".into()));
    }
    let mut rows = Vec::with_capacity(steps);
    for k in 0..steps {
        let v = lo + (hi - lo) * k as f64 / (steps - 1) as f64;
        let mut beta = beta_fixed.clone();
        beta[axis] = v;
        let obj = objective(&beta, weights, view, nu);
        let sc = score(&beta, weights, view)
            .map(|u| u.iter().cloned().collect::<Vec<f64>>())
            .unwrap_or_else(|_| vec![f64::NAN; view.dim]);
        rows.push(SurfaceRow {
            beta_axis: v,
            objective: obj,
            score: sc,
        });
    }
    Ok(rows)
}
