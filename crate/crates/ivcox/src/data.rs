//! Domain types, dataset validation, and the counting-process view shared by
//! all fitting variants.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Survival-data flavour of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    RightCensored,
    LeftTruncated,
    /// K competing causes; status carries the cause label in 1..=K, 0 = censored.
    CompetingRisks(u32),
    Recurrent,
}

/// One observation: follow-up time, event indicator or cause, treatment D,
/// instrument V, covariates, and the optional truncation / window fields.
#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub id: String,
    pub time: f64,
    /// 0 = censored; 1 = event; in competing-risks mode, the cause label.
    pub status: u32,
    pub treatment: u8,
    pub instrument: u8,
    pub covariates: Vec<f64>,
    /// Left-truncation entry time L (observable population requires L < time).
    pub entry: Option<f64>,
    /// Recurrent-event observation window (L, R].
    pub window: Option<(f64, f64)>,
    /// Sorted recurrent-event times, all in (window.0, window.1].
    pub event_times: Option<Vec<f64>>,
}

impl SubjectRecord {
    pub fn right_censored(
        id: impl Into<String>,
        time: f64,
        status: u32,
        treatment: u8,
        instrument: u8,
        covariates: Vec<f64>,
    ) -> Self {
        SubjectRecord {
            id: id.into(),
            time,
            status,
            treatment,
            instrument,
            covariates,
            entry: None,
            window: None,
            event_times: None,
        }
    }
}

/// A named invariant violation, diagnostic only.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub id: String,
    pub rule: String,
}

/// How tied event times are handled before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TiePolicy {
    /// Reject datasets containing tied event times (default for the estimator).
    Error,
    /// Break ties with deterministic seeded uniform noise of magnitude
    /// 1e-9 times the time scale.
    Jitter { seed: u64 },
}

/// Immutable collection of subject records with a fixed covariate dimension.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<SubjectRecord>,
    pub mode: Mode,
    pub p: usize,
}

impl Dataset {
    pub fn new(records: Vec<SubjectRecord>, mode: Mode) -> Result<Self> {
        let p = records.first().map(|r| r.covariates.len()).unwrap_or(0);
        let ds = Dataset { records, mode, p };
        let violations = ds.validate();
        if violations.is_empty() {
            Ok(ds)
        } else {
            let msg = violations
                .iter()
                .take(5)
                .map(|v| format!("{}: {}", v.id, v.rule))
                .collect::<Vec<_>>()
                .join("; ");
            Err(Error::Invalid(format!(
                "{} violation(s): {}",
                violations.len(),
                msg
            )))
        }
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    /// Checks every type invariant; returns one entry per violated rule.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for r in &self.records {
            if !(r.time >= 0.0) {
                out.push(Violation {
                    id: r.id.clone(),
                    rule: "time >= 0 required".into(),
                });
            }
            if let Some(entry) = r.entry {
                if !(entry < r.time) {
                    out.push(Violation {
                        id: r.id.clone(),
                        rule: "entry < time required".into(),
                    });
                }
                if entry < 0.0 {
                    out.push(Violation {
                        id: r.id.clone(),
                        rule: "entry >= 0 required".into(),
                    });
                }
            }
            if r.treatment > 1 {
                out.push(Violation {
                    id: r.id.clone(),
                    rule: "treatment must be binary".into(),
                });
            }
            if r.instrument > 1 {
                out.push(Violation {
                    id: r.id.clone(),
                    rule: "instrument must be binary".into(),
                });
            }
            if r.covariates.len() != self.p {
                out.push(Violation {
                    id: r.id.clone(),
                    rule: format!(
                        "covariate length {} differs from dataset dimension {}",
                        r.covariates.len(),
                        self.p
                    ),
                });
            }
            if r.covariates.iter().any(|x| !x.is_finite()) {
                out.push(Violation {
                    id: r.id.clone(),
                    rule: "missing or non-finite covariate".into(),
                });
            }
            match self.mode {
                Mode::RightCensored | Mode::LeftTruncated => {
                    if r.status > 1 {
                        out.push(Violation {
                            id: r.id.clone(),
                            rule: "status must be 0/1 outside competing-risks mode".into(),
                        });
                    }
                    if self.mode == Mode::LeftTruncated && r.entry.is_none() {
                        out.push(Violation {
                            id: r.id.clone(),
                            rule: "entry required in left-truncated mode".into(),
                        });
                    }
                }
                Mode::CompetingRisks(k) => {
                    if r.status > k {
                        out.push(Violation {
                            id: r.id.clone(),
                            rule: format!("cause label {} exceeds K={}", r.status, k),
                        });
                    }
                }
                Mode::Recurrent => {
                    let Some((lo, hi)) = r.window else {
                        out.push(Violation {
                            id: r.id.clone(),
                            rule: "window required in recurrent mode".into(),
                        });
                        continue;
                    };
                    if !(lo < hi) {
                        out.push(Violation {
                            id: r.id.clone(),
                            rule: "window must satisfy lo < hi".into(),
                        });
                    }
                    if let Some(times) = &r.event_times {
                        if times.windows(2).any(|w| w[0] > w[1]) {
                            out.push(Violation {
                                id: r.id.clone(),
                                rule: "recurrent event times must be sorted".into(),
                            });
                        }
                        if times.iter().any(|&t| t <= lo || t > hi) {
                            out.push(Violation {
                                id: r.id.clone(),
                                rule: "recurrent event times must lie in (lo, hi]".into(),
                            });
                        }
                    }
                }
            }
        }
        // Tied event times violate the continuous-time counting-process
        // assumption dN_i(t) <= 1.
        let mut event_times: Vec<(f64, &str)> = Vec::new();
        for r in &self.records {
            match self.mode {
                Mode::Recurrent => {
                    if let Some(times) = &r.event_times {
                        for &t in times {
                            event_times.push((t, &r.id));
                        }
                    }
                }
                _ => {
                    if r.status != 0 {
                        event_times.push((r.time, &r.id));
                    }
                }
            }
        }
        event_times.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in event_times.windows(2) {
            if w[0].0 == w[1].0 {
                out.push(Violation {
                    id: w[1].1.to_string(),
                    rule: format!("tied event times at {}", w[1].0),
                });
            }
        }
        out
    }

    /// Applies the tie policy. `Error` fails on ties; `Jitter` adds seeded
    /// uniform noise of magnitude 1e-9 * (time scale) to tied event times.
    pub fn resolve_ties(mut self, policy: TiePolicy) -> Result<Self> {
        let has_ties = |ds: &Dataset| {
            ds.validate()
                .iter()
                .any(|v| v.rule.starts_with("tied event times"))
        };
        match policy {
            TiePolicy::Error => {
                if has_ties(&self) {
                    Err(Error::Invalid("tied event times".into()))
                } else {
                    Ok(self)
                }
            }
            TiePolicy::Jitter { seed } => {
                if !has_ties(&self) {
                    return Ok(self);
                }
                let scale = self
                    .records
                    .iter()
                    .map(|r| r.time)
                    .fold(0.0_f64, f64::max)
                    .max(1e-300);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for r in &mut self.records {
                    if r.status != 0 {
                        r.time += rng.random::<f64>() * 1e-9 * scale;
                    }
                    if let Some(times) = &mut r.event_times {
                        for t in times.iter_mut() {
                            *t += rng.random::<f64>() * 1e-9 * scale;
                        }
                    }
                }
                if has_ties(&self) {
                    return Err(Error::Invalid("tied event times persist after jitter".into()));
                }
                Ok(self)
            }
        }
    }

    /// Copy of the dataset with the instrument substituted for the treatment,
    /// used for the ITT comparator fit.
    pub fn with_instrument_as_treatment(&self) -> Dataset {
        let mut ds = self.clone();
        for r in &mut ds.records {
            r.treatment = r.instrument;
        }
        ds
    }
}

/// Per-subject counting-process data: at-risk interval (entry, exit], the
/// subject's event times, and the regression vector Z = (D, X).
#[derive(Debug, Clone)]
pub struct ViewSubject {
    pub entry: f64,
    pub exit: f64,
    pub events: Vec<f64>,
    pub z: DVector<f64>,
}

/// Counting-process view of a dataset: (entry, exit, events) triples plus the
/// sorted distinct event-time grid. Immutable after construction.
#[derive(Debug, Clone)]
pub struct CountingView {
    pub subjects: Vec<ViewSubject>,
    /// Sorted distinct event times.
    pub grid: Vec<f64>,
    /// (grid index, subject index) for every event, sorted by time.
    pub events: Vec<(usize, usize)>,
    /// Dimension of Z, i.e. p + 1.
    pub dim: usize,
}

impl CountingView {
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    /// Total observed event count.
    pub fn n_events(&self) -> usize {
        self.events.len()
    }
}

/// Builds the counting-process view. `cause` selects the failure type in
/// competing-risks mode (other causes become censorings) and must be absent
/// otherwise.
pub fn build_counting_view(dataset: &Dataset, cause: Option<u32>) -> Result<CountingView> {
    match (dataset.mode, cause) {
        (Mode::CompetingRisks(k), Some(c)) => {
            if c == 0 || c > k {
                return Err(Error::CauseOutOfRange { cause: c, max: k });
            }
        }
        (Mode::CompetingRisks(_), None) => {
            return Err(Error::Config(
                "competing-risks mode requires a cause selection".into(),
            ))
        }
        (_, Some(_)) => {
            return Err(Error::Config(
                "cause selection only valid in competing-risks mode".into(),
            ))
        }
        _ => {}
    }

    let mut subjects = Vec::with_capacity(dataset.n());
    for r in &dataset.records {
        let mut z = DVector::zeros(dataset.p + 1);
        z[0] = r.treatment as f64;
        for (j, &x) in r.covariates.iter().enumerate() {
            z[j + 1] = x;
        }
        let (entry, exit, events) = match dataset.mode {
            Mode::RightCensored => {
                let ev = if r.status == 1 { vec![r.time] } else { vec![] };
                (0.0, r.time, ev)
            }
            Mode::LeftTruncated => {
                let ev = if r.status == 1 { vec![r.time] } else { vec![] };
                (r.entry.unwrap_or(0.0), r.time, ev)
            }
            Mode::CompetingRisks(_) => {
                let k = cause.unwrap();
                let ev = if r.status == k { vec![r.time] } else { vec![] };
                (0.0, r.time, ev)
            }
            Mode::Recurrent => {
                let (lo, hi) = r.window.unwrap_or((0.0, r.time));
                (lo, hi, r.event_times.clone().unwrap_or_default())
            }
        };
        subjects.push(ViewSubject {
            entry,
            exit,
            events,
            z,
        });
    }

    let mut events: Vec<(f64, usize)> = subjects
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.events.iter().map(move |&t| (t, i)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let grid: Vec<f64> = events.iter().map(|e| e.0).collect();
    let events: Vec<(usize, usize)> = events
        .iter()
        .enumerate()
        .map(|(gi, &(_, si))| (gi, si))
        .collect();

    Ok(CountingView {
        subjects,
        grid,
        events,
        dim: dataset.p + 1,
    })
}
