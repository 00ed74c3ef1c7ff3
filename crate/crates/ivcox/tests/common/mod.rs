//! An independent textbook Cox implementation used as a cross-check oracle.
//!
//! Deliberately naive: risk sets are enumerated by scanning all subjects at
//! every event time, and the Newton iteration is written directly from the
//! standard partial-likelihood formulas. It shares no code with the library
//! under test.

use nalgebra::{DMatrix, DVector};

pub struct OracleSubject {
    pub time: f64,
    pub event: bool,
    pub z: Vec<f64>,
}

fn risk_moments(
    subjects: &[OracleSubject],
    beta: &DVector<f64>,
    t: f64,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let d = beta.len();
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(d);
    let mut s2 = DMatrix::zeros(d, d);
    for s in subjects {
        if s.time >= t {
            let z = DVector::from_vec(s.z.clone());
            let e = beta.dot(&z).exp();
            s0 += e;
            s1 += e * &z;
            s2.ger(e, &z, &z, 1.0);
        }
    }
    (s0, s1, s2)
}

/// Log partial likelihood (unnormalized).
pub fn log_partial_likelihood(subjects: &[OracleSubject], beta: &DVector<f64>) -> f64 {
    let mut ll = 0.0;
    for s in subjects {
        if s.event {
            let z = DVector::from_vec(s.z.clone());
            let (s0, _, _) = risk_moments(subjects, beta, s.time);
            ll += beta.dot(&z) - s0.ln();
        }
    }
    ll
}

/// Textbook Newton-Raphson Cox fit from beta = 0.
pub fn cox_fit(subjects: &[OracleSubject]) -> DVector<f64> {
    let d = subjects.iter().map(|s| s.z.len()).max().unwrap_or(0);
    let mut beta = DVector::zeros(d);
    for _ in 0..50 {
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        for s in subjects {
            if !s.event {
                continue;
            }
            let z = DVector::from_vec(s.z.clone());
            let (s0, s1, s2) = risk_moments(subjects, &beta, s.time);
            let ebar = &s1 / s0;
            grad += &z - &ebar;
            let mut v = s2 / s0;
            v.ger(-1.0, &ebar, &ebar, 1.0);
            hess += v;
        }
        if grad.amax() < 1e-10 {
            break;
        }
        let step = hess.lu().solve(&grad).expect("oracle hessian solvable");
        beta += step;
    }
    beta
}

/// Textbook Breslow estimator at the event times, sorted ascending.
pub fn breslow_increments(subjects: &[OracleSubject], beta: &DVector<f64>) -> Vec<(f64, f64)> {
    let mut times: Vec<f64> = subjects.iter().filter(|s| s.event).map(|s| s.time).collect();
    times.sort_by(f64::total_cmp);
    times
        .iter()
        .map(|&t| {
            let (s0, _, _) = risk_moments(subjects, beta, t);
            (t, 1.0 / s0)
        })
        .collect()
}
