//! Command-line interface: `fit`, `bootstrap`, `simulate`, and `surface`
//! subcommands over CSV input, emitting deterministic key=value manifests on
//! stdout and CSV artifacts on request. All floating-point output uses the
//! shortest round-trip formatting, so identical runs produce byte-identical
//! files.

use std::fs::File;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use crate::data::{build_counting_view, Dataset, Mode, SubjectRecord, TiePolicy};
use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::phfit::{breslow, surface, FitOptions};
use crate::pipeline::{Pipeline, PipelineFit};
use crate::simgen::{generate, generate_extension, ExtensionMode, SimConfig};
use crate::variance::{analytic_variance, bootstrap_variance, BootstrapOptions, VarianceEstimate};
use crate::weights::{complier_proportion, DesignPolicy, WeightMethod};

#[derive(Parser, Debug)]
#[command(
    name = "ivcox",
    version,
    about = "Complier hazard ratio estimation with a binary instrument"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Point estimation on a CSV dataset.
    Fit(FitArgs),
    /// Point estimation plus bootstrap standard errors.
    Bootstrap(BootstrapArgs),
    /// Seeded synthetic data generation and Monte Carlo studies.
    Simulate(SimulateArgs),
    /// Objective and score values along one coefficient axis.
    Surface(SurfaceArgs),
}

#[derive(Args, Debug)]
pub struct InputArgs {
    /// Input CSV with columns time,status,treatment,instrument,x1..xp and
    /// optional id,entry,win_lo,win_hi,event_1..event_K.
    #[arg(long)]
    pub input: PathBuf,
    /// right-censored | left-truncated | competing-risks | recurrent.
    #[arg(long, default_value = "right-censored")]
    pub mode: String,
    /// Event cause of interest in competing-risks mode (default 1).
    #[arg(long)]
    pub cause: Option<u32>,
    /// Skip unrecognized CSV columns instead of failing.
    #[arg(long)]
    pub ignore_extra: bool,
    /// Break tied event times with seeded jitter instead of failing.
    #[arg(long)]
    pub jitter_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct MethodArgs {
    /// kappa | kappa_v | kappa_v_tr | unit.
    #[arg(long, default_value = "kappa_v_tr")]
    pub weights: String,
    /// second-order | first-order | interaction-only | marginal.
    #[arg(long, default_value = "second-order")]
    pub design: String,
    /// Truncation interval for kappa_v_tr, as "lo,hi".
    #[arg(long, default_value = "0.01,0.99", value_parser = parse_interval)]
    pub truncate: (f64, f64),
    /// Floor applied to risk-set sums inside the log.
    #[arg(long, default_value_t = 1e-4)]
    pub nu: f64,
    /// Sup-norm tolerance certifying a root of the weighted score.
    #[arg(long, default_value_t = 0.05)]
    pub tol: f64,
}

fn parse_interval(s: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected `lo,hi`".into());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = parts[1].trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

impl MethodArgs {
    fn pipeline(&self) -> Result<Pipeline> {
        Ok(Pipeline {
            method: WeightMethod::parse(&self.weights)?,
            design_policy: DesignPolicy::parse(&self.design)?,
            fit_options: FitOptions {
                nu: self.nu,
                tol: self.tol,
                ..FitOptions::default()
            },
            truncation: self.truncate,
        })
    }
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Also report naive as-treated and intention-to-treat fits.
    #[arg(long)]
    pub comparators: bool,
    /// Report analytic plug-in standard errors (kappa and unit weights).
    #[arg(long)]
    pub analytic_se: bool,
    /// Write the weighted Breslow baseline to this CSV.
    #[arg(long)]
    pub baseline_out: Option<PathBuf>,
    /// Also write the manifest to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Number of converged replicates to collect.
    #[arg(long, default_value_t = 200)]
    pub b: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Force the sequential backend.
    #[arg(long)]
    pub sequential: bool,
    /// Write converged replicate coefficients to this CSV.
    #[arg(long)]
    pub replicates_out: Option<PathBuf>,
    /// Also write the manifest to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Scenario 1 or 2.
    #[arg(long)]
    pub scenario: u8,
    /// Case 1..8.
    #[arg(long)]
    pub case: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// none | left-truncated | competing-risks | recurrent.
    #[arg(long, default_value = "none")]
    pub extension: String,
    /// Cause-2 base rate for the competing-risks extension.
    #[arg(long, default_value_t = 1.0)]
    pub cause2_rate: f64,
    /// Upper bound of the truncation law; default is the 20th percentile of
    /// the latent event times.
    #[arg(long)]
    pub truncation_upper: Option<f64>,
    /// Write one generated dataset to this CSV and stop.
    #[arg(long)]
    pub emit: Option<PathBuf>,
    /// Run a Monte Carlo study with this many replications.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Comma-separated weight methods for the study.
    #[arg(long, default_value = "kappa,kappa_v,kappa_v_tr")]
    pub weights: String,
    /// Bootstrap replicates per study replication (0 disables SEs).
    #[arg(long, default_value_t = 0)]
    pub b: usize,
    /// Force the sequential backend.
    #[arg(long)]
    pub sequential: bool,
    /// Also write the manifest to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SurfaceArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Coefficient index to sweep (0 = treatment).
    #[arg(long, default_value_t = 0)]
    pub axis: usize,
    #[arg(long, allow_hyphen_values = true)]
    pub min: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub max: f64,
    #[arg(long, default_value_t = 81)]
    pub steps: usize,
    /// Comma-separated values pinning the other coefficients (default all 0).
    #[arg(long, allow_hyphen_values = true)]
    pub fix: Option<String>,
    /// Output CSV path.
    #[arg(long)]
    pub output: PathBuf,
}

// ---------------------------------------------------------------------------
// CSV ingestion

enum Column {
    Id,
    Time,
    Status,
    Treatment,
    Instrument,
    Entry,
    WinLo,
    WinHi,
    Covariate(usize),
    Event(usize),
    Skip,
}

fn classify_header(name: &str, ignore_extra: bool) -> Result<Column> {
    match name {
        "id" => Ok(Column::Id),
        "time" => Ok(Column::Time),
        "status" => Ok(Column::Status),
        "treatment" => Ok(Column::Treatment),
        "instrument" => Ok(Column::Instrument),
        "entry" => Ok(Column::Entry),
        "win_lo" => Ok(Column::WinLo),
        "win_hi" => Ok(Column::WinHi),
        _ => {
            if let Some(rest) = name.strip_prefix('x') {
                if let Ok(j) = rest.parse::<usize>() {
                    if j >= 1 {
                        return Ok(Column::Covariate(j - 1));
                    }
                }
            }
            if let Some(rest) = name.strip_prefix("event_") {
                if let Ok(k) = rest.parse::<usize>() {
                    if k >= 1 {
                        return Ok(Column::Event(k - 1));
                    }
                }
            }
            if ignore_extra {
                Ok(Column::Skip)
            } else {
                Err(Error::Csv(format!(
                    "unknown column `{name}` (pass --ignore-extra to skip it)"
                )))
            }
        }
    }
}

fn parse_mode(s: &str) -> Result<&'static str> {
    match s.replace('_', "-").as_str() {
        "right-censored" => Ok("right-censored"),
        "left-truncated" => Ok("left-truncated"),
        "competing-risks" => Ok("competing-risks"),
        "recurrent" => Ok("recurrent"),
        other => Err(Error::Config(format!("unknown mode `{other}`"))),
    }
}

/// Reads a dataset from CSV. Row numbers in error messages count the header
/// as row 1.
pub fn read_dataset(path: &Path, args: &InputArgs) -> Result<Dataset> {
    let mode_name = parse_mode(&args.mode)?;
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    let columns: Vec<Column> = headers
        .iter()
        .map(|h| classify_header(h.trim(), args.ignore_extra))
        .collect::<Result<_>>()?;

    let mut cov_idx: Vec<usize> = columns
        .iter()
        .filter_map(|c| match c {
            Column::Covariate(j) => Some(*j),
            _ => None,
        })
        .collect();
    cov_idx.sort_unstable();
    let p = cov_idx.len();
    if cov_idx.iter().enumerate().any(|(k, &j)| k != j) {
        return Err(Error::Csv("covariate columns must be x1..xp with no gaps".into()));
    }
    for required in ["time", "status", "treatment", "instrument"] {
        if !headers.iter().any(|h| h.trim() == required) {
            return Err(Error::Csv(format!("missing required column `{required}`")));
        }
    }
    let n_event_cols = columns
        .iter()
        .filter(|c| matches!(c, Column::Event(_)))
        .count();

    let mut records = Vec::new();
    for (ri, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Csv(e.to_string()))?;
        let rownum = ri + 2;
        let bad = |field: &str, value: &str| {
            Error::Csv(format!("row {rownum}: cannot parse {field} from `{value}`"))
        };
        let mut rec = SubjectRecord::right_censored(format!("r{rownum}"), 0.0, 0, 0, 0, vec![0.0; p]);
        let mut events = vec![f64::NAN; n_event_cols];
        let mut win = (None, None);
        for (col, value) in columns.iter().zip(row.iter()) {
            let v = value.trim();
            match col {
                Column::Skip => {}
                Column::Id => rec.id = v.to_string(),
                Column::Time => rec.time = v.parse().map_err(|_| bad("time", v))?,
                Column::Status => rec.status = v.parse().map_err(|_| bad("status", v))?,
                Column::Treatment => rec.treatment = v.parse().map_err(|_| bad("treatment", v))?,
                Column::Instrument => rec.instrument = v.parse().map_err(|_| bad("instrument", v))?,
                Column::Entry => {
                    if !v.is_empty() {
                        rec.entry = Some(v.parse().map_err(|_| bad("entry", v))?);
                    }
                }
                Column::WinLo => {
                    if !v.is_empty() {
                        win.0 = Some(v.parse().map_err(|_| bad("win_lo", v))?);
                    }
                }
                Column::WinHi => {
                    if !v.is_empty() {
                        win.1 = Some(v.parse().map_err(|_| bad("win_hi", v))?);
                    }
                }
                Column::Covariate(j) => {
                    rec.covariates[*j] = v.parse().map_err(|_| bad("covariate", v))?;
                }
                Column::Event(k) => {
                    if !v.is_empty() {
                        events[*k] = v.parse().map_err(|_| bad("event time", v))?;
                    }
                }
            }
        }
        if let (Some(lo), Some(hi)) = win {
            rec.window = Some((lo, hi));
        }
        if mode_name == "recurrent" {
            let mut ts: Vec<f64> = events.into_iter().filter(|t| t.is_finite()).collect();
            ts.sort_by(f64::total_cmp);
            rec.event_times = Some(ts);
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mode = match mode_name {
        "right-censored" => Mode::RightCensored,
        "left-truncated" => Mode::LeftTruncated,
        "competing-risks" => {
            let k = records.iter().map(|r| r.status).max().unwrap_or(1).max(1);
            Mode::CompetingRisks(k)
        }
        _ => Mode::Recurrent,
    };

    match args.jitter_seed {
        Some(seed) => {
            // Build without validating first so the jitter can repair ties,
            // then run the full validation.
            let ds = Dataset {
                p: records.first().map(|r| r.covariates.len()).unwrap_or(0),
                records,
                mode,
            };
            let ds = ds.resolve_ties(TiePolicy::Jitter { seed })?;
            Dataset::new(ds.records, mode)
        }
        None => Dataset::new(records, mode),
    }
}

/// Writes a dataset in the schema `read_dataset` accepts.
pub fn write_dataset_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    let p = dataset.p;
    let n_event_cols = dataset
        .records
        .iter()
        .filter_map(|r| r.event_times.as_ref().map(Vec::len))
        .max()
        .unwrap_or(0);
    let mut header = vec![
        "id".to_string(),
        "time".into(),
        "status".into(),
        "treatment".into(),
        "instrument".into(),
    ];
    if dataset.mode == Mode::LeftTruncated {
        header.push("entry".into());
    }
    if dataset.mode == Mode::Recurrent {
        header.push("win_lo".into());
        header.push("win_hi".into());
        for k in 1..=n_event_cols {
            header.push(format!("event_{k}"));
        }
    }
    for j in 1..=p {
        header.push(format!("x{j}"));
    }
    w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
    for r in &dataset.records {
        let mut row = vec![
            r.id.clone(),
            format!("{}", r.time),
            format!("{}", r.status),
            format!("{}", r.treatment),
            format!("{}", r.instrument),
        ];
        if dataset.mode == Mode::LeftTruncated {
            row.push(r.entry.map_or(String::new(), |e| format!("{e}")));
        }
        if dataset.mode == Mode::Recurrent {
            let (lo, hi) = r.window.unwrap_or((0.0, r.time));
            row.push(format!("{lo}"));
            row.push(format!("{hi}"));
            let empty = Vec::new();
            let events = r.event_times.as_ref().unwrap_or(&empty);
            for k in 0..n_event_cols {
                row.push(events.get(k).map_or(String::new(), |t| format!("{t}")));
            }
        }
        for &x in &r.covariates {
            row.push(format!("{x}"));
        }
        w.write_record(&row).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifests

struct Manifest {
    pairs: Vec<(String, String)>,
}

impl Manifest {
    fn new() -> Self {
        Manifest { pairs: Vec::new() }
    }
    fn push(&mut self, key: &str, value: impl std::fmt::Display) {
        self.pairs.push((key.to_string(), format!("{value}")));
    }
    fn emit(&self, out: &mut dyn IoWrite, also: Option<&Path>) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.pairs {
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        out.write_all(text.as_bytes())?;
        if let Some(path) = also {
            File::create(path)?.write_all(text.as_bytes())?;
        }
        Ok(())
    }
}

fn beta_names(p: usize) -> Vec<String> {
    let mut names = vec!["beta_d".to_string()];
    for j in 1..=p {
        names.push(format!("beta_x{j}"));
    }
    names
}

fn push_beta(m: &mut Manifest, prefix: &str, beta: &DVector<f64>, p: usize) {
    for (name, value) in beta_names(p).iter().zip(beta.iter()) {
        m.push(&format!("{prefix}{name}"), value);
    }
}

fn push_fit(m: &mut Manifest, run: &PipelineFit, dataset: &Dataset) -> Result<()> {
    m.push("weights", run.weights.method.label());
    m.push("n", dataset.n());
    m.push("p", dataset.p);
    push_beta(m, "", &run.fit.beta, dataset.p);
    m.push("objective", run.fit.objective);
    m.push("score_sup_norm", run.fit.score_norm);
    m.push("score_sup_norm_raw", run.fit.score_norm_unnormalized);
    m.push("converged", run.fit.converged);
    m.push("starts_tried", run.fit.starts_tried.len());
    m.push("nu", run.fit.nu);
    if let Some(prop) = &run.propensity {
        for (j, a) in prop.alpha.iter().enumerate() {
            m.push(&format!("propensity_alpha_{j}"), a);
        }
    }
    if matches!(
        run.weights.method,
        WeightMethod::Kappa | WeightMethod::KappaV | WeightMethod::KappaVTr
    ) {
        m.push("complier_share", complier_proportion(&run.weights)?);
    }
    if let Some((lo, hi)) = run.weights.truncation_interval {
        m.push("truncation_lo", lo);
        m.push("truncation_hi", hi);
    }
    Ok(())
}

fn push_variance(m: &mut Manifest, var: &VarianceEstimate, p: usize) {
    m.push("variance_method", &var.method);
    let names = beta_names(p);
    for (name, se) in names.iter().zip(var.se()) {
        m.push(&format!("se_{name}"), se);
    }
    for (name, se) in names.iter().zip(&var.se_mad) {
        m.push(&format!("se_mad_{name}"), se);
    }
    if var.method == "bootstrap" {
        m.push("b_requested", var.requested);
        m.push("b_attempted", var.attempted);
        m.push("b_converged", var.converged);
    }
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_fit(args: &FitArgs, out: &mut dyn IoWrite) -> Result<()> {
    let dataset = read_dataset(&args.input.input, &args.input)?;
    let pipeline = args.method.pipeline()?;
    let run = pipeline.run(&dataset, args.input.cause, None)?;

    let mut m = Manifest::new();
    m.push("command", "fit");
    m.push("mode", parse_mode(&args.input.mode)?);
    push_fit(&mut m, &run, &dataset)?;

    if args.analytic_se {
        let var = analytic_variance(&dataset, &run.weights, &run.fit.beta, args.input.cause)?;
        push_variance(&mut m, &var, dataset.p);
    }
    if args.comparators {
        let naive = Pipeline {
            method: WeightMethod::Unit,
            ..pipeline
        }
        .run(&dataset, args.input.cause, None)?;
        push_beta(&mut m, "naive_", &naive.fit.beta, dataset.p);
        let itt_data = dataset.with_instrument_as_treatment();
        let itt = Pipeline {
            method: WeightMethod::Unit,
            ..pipeline
        }
        .run(&itt_data, args.input.cause, None)?;
        push_beta(&mut m, "itt_", &itt.fit.beta, dataset.p);
    }
    if let Some(path) = &args.baseline_out {
        let view = build_counting_view(&dataset, args.input.cause)?;
        let baseline = breslow(&view, &run.weights, &run.fit.beta)?;
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
        w.write_record(["time", "increment", "cumulative"])
            .map_err(|e| Error::Csv(e.to_string()))?;
        let mut cum = 0.0;
        for (t, d) in baseline.times.iter().zip(&baseline.increments) {
            cum += d;
            w.write_record([format!("{t}"), format!("{d}"), format!("{cum}")])
                .map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))?;
    }
    m.emit(out, args.out.as_deref())
}

fn cmd_bootstrap(args: &BootstrapArgs, out: &mut dyn IoWrite) -> Result<()> {
    let dataset = read_dataset(&args.input.input, &args.input)?;
    let pipeline = args.method.pipeline()?;
    let run = pipeline.run(&dataset, args.input.cause, None)?;
    let opts = BootstrapOptions {
        b: args.b,
        seed: args.seed,
        parallel: !args.sequential,
        cause: args.input.cause,
    };
    let var = bootstrap_variance(&dataset, &pipeline, None, &opts)?;

    if let Some(path) = &args.replicates_out {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
        let mut header = vec!["replicate".to_string()];
        header.extend(beta_names(dataset.p));
        w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
        for (i, rep) in var.replicates.iter().enumerate() {
            let mut row = vec![format!("{i}")];
            row.extend(rep.iter().map(|v| format!("{v}")));
            w.write_record(&row).map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))?;
    }

    let mut m = Manifest::new();
    m.push("command", "bootstrap");
    m.push("mode", parse_mode(&args.input.mode)?);
    m.push("seed", args.seed);
    push_fit(&mut m, &run, &dataset)?;
    push_variance(&mut m, &var, dataset.p);
    m.emit(out, args.out.as_deref())
}

fn parse_extension(args: &SimulateArgs) -> Result<Option<ExtensionMode>> {
    match args.extension.replace('_', "-").as_str() {
        "none" => Ok(None),
        "left-truncated" => Ok(Some(ExtensionMode::LeftTruncated {
            upper: args.truncation_upper,
        })),
        "competing-risks" => Ok(Some(ExtensionMode::CompetingRisks {
            cause2_rate: args.cause2_rate,
        })),
        "recurrent" => Ok(Some(ExtensionMode::Recurrent)),
        other => Err(Error::Config(format!("unknown extension `{other}`"))),
    }
}

struct RepOutcome {
    beta: Option<DVector<f64>>,
    se: Option<Vec<f64>>,
    covered: Option<Vec<bool>>,
}

fn cmd_simulate(args: &SimulateArgs, out: &mut dyn IoWrite) -> Result<()> {
    let config = SimConfig::case(args.scenario, args.case, args.seed)?;
    let extension = parse_extension(args)?;

    if let Some(path) = &args.emit {
        let oracle = match extension {
            None => generate(&config)?,
            Some(ext) => generate_extension(&config, ext)?,
        };
        write_dataset_csv(&oracle.dataset, path)?;
        let mut m = Manifest::new();
        m.push("command", "simulate");
        m.push("scenario", args.scenario);
        m.push("case", args.case);
        m.push("seed", args.seed);
        m.push("extension", &args.extension);
        m.push("n", oracle.dataset.n());
        m.push("emitted", path.display());
        return m.emit(out, args.out.as_deref());
    }

    let reps = args.reps.ok_or_else(|| {
        Error::Config("simulate needs either --emit PATH or --reps R".into())
    })?;
    if reps == 0 {
        return Err(Error::Config("--reps must be positive".into()));
    }
    let methods: Vec<WeightMethod> = args
        .weights
        .split(',')
        .map(|s| WeightMethod::parse(s.trim()))
        .collect::<Result<_>>()?;
    let truth = DVector::from_vec(vec![config.beta_complier.0, config.beta_complier.1]);
    let cause = extension
        .as_ref()
        .and_then(|e| matches!(e, ExtensionMode::CompetingRisks { .. }).then_some(1));

    let mut m = Manifest::new();
    m.push("command", "simulate");
    m.push("scenario", args.scenario);
    m.push("case", args.case);
    m.push("seed", args.seed);
    m.push("extension", &args.extension);
    m.push("reps", reps);
    m.push("n", config.n);
    push_beta(&mut m, "true_", &truth, 1);

    for method in methods {
        let pipeline = Pipeline::new(method);
        let outcomes: Vec<RepOutcome> = map_indexed(reps, !args.sequential, |r| {
            let cfg = SimConfig {
                seed: args.seed.wrapping_add(r as u64),
                ..config
            };
            let oracle = match extension {
                None => generate(&cfg),
                Some(ext) => generate_extension(&cfg, ext),
            };
            let Ok(oracle) = oracle else {
                return RepOutcome {
                    beta: None,
                    se: None,
                    covered: None,
                };
            };
            let flags = oracle.complier_flags();
            let run = pipeline.run(&oracle.dataset, cause, Some(&flags));
            match run {
                Ok(run) if run.fit.converged => {
                    let (se, covered) = if args.b > 0 {
                        let opts = BootstrapOptions {
                            b: args.b,
                            seed: args.seed.wrapping_add(r as u64).wrapping_mul(2654435761),
                            parallel: false,
                            cause,
                        };
                        match bootstrap_variance(&oracle.dataset, &pipeline, Some(&flags), &opts) {
                            Ok(var) => {
                                let se = var.se();
                                let covered = se
                                    .iter()
                                    .enumerate()
                                    .map(|(j, s)| (run.fit.beta[j] - truth[j]).abs() <= 1.96 * s)
                                    .collect();
                                (Some(se), Some(covered))
                            }
                            Err(_) => (None, None),
                        }
                    } else {
                        (None, None)
                    };
                    RepOutcome {
                        beta: Some(run.fit.beta),
                        se,
                        covered,
                    }
                }
                _ => RepOutcome {
                    beta: None,
                    se: None,
                    covered: None,
                },
            }
        });

        let label = method.label();
        let betas: Vec<&DVector<f64>> = outcomes.iter().filter_map(|o| o.beta.as_ref()).collect();
        let conv = betas.len();
        m.push(&format!("{label}.converged"), conv);
        m.push(
            &format!("{label}.convergence_rate"),
            conv as f64 / reps as f64,
        );
        if conv > 0 {
            let names = beta_names(1);
            for (j, name) in names.iter().enumerate() {
                let mut vals: Vec<f64> = betas.iter().map(|b| b[j]).collect();
                let mean = vals.iter().sum::<f64>() / conv as f64;
                vals.sort_by(f64::total_cmp);
                let median = if conv % 2 == 1 {
                    vals[conv / 2]
                } else {
                    0.5 * (vals[conv / 2 - 1] + vals[conv / 2])
                };
                let sd = if conv > 1 {
                    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (conv - 1) as f64)
                        .sqrt()
                } else {
                    0.0
                };
                m.push(&format!("{label}.mean_{name}"), mean);
                m.push(&format!("{label}.median_{name}"), median);
                m.push(&format!("{label}.sd_{name}"), sd);
                if args.b > 0 {
                    let ses: Vec<f64> = outcomes
                        .iter()
                        .filter_map(|o| o.se.as_ref().map(|s| s[j]))
                        .collect();
                    if !ses.is_empty() {
                        let mut sorted = ses.clone();
                        sorted.sort_by(f64::total_cmp);
                        let med_se = if sorted.len() % 2 == 1 {
                            sorted[sorted.len() / 2]
                        } else {
                            0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
                        };
                        m.push(
                            &format!("{label}.mean_se_{name}"),
                            ses.iter().sum::<f64>() / ses.len() as f64,
                        );
                        m.push(&format!("{label}.median_se_{name}"), med_se);
                    }
                    let cov: Vec<bool> = outcomes
                        .iter()
                        .filter_map(|o| o.covered.as_ref().map(|c| c[j]))
                        .collect();
                    if !cov.is_empty() {
                        m.push(
                            &format!("{label}.coverage_{name}"),
                            cov.iter().filter(|&&c| c).count() as f64 / cov.len() as f64,
                        );
                    }
                }
            }
        }
    }
    m.emit(out, args.out.as_deref())
}

fn cmd_surface(args: &SurfaceArgs, out: &mut dyn IoWrite) -> Result<()> {
    let dataset = read_dataset(&args.input.input, &args.input)?;
    let pipeline = args.method.pipeline()?;
    let weights = pipeline.build_weights(&dataset, None)?;
    let view = build_counting_view(&dataset, args.input.cause)?;

    let beta_fixed = match &args.fix {
        Some(s) => {
            let vals: Vec<f64> = s
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("cannot parse --fix value `{v}`")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != view.dim {
                return Err(Error::DimensionMismatch {
                    expected: view.dim,
                    got: vals.len(),
                });
            }
            DVector::from_vec(vals)
        }
        None => DVector::zeros(view.dim),
    };

    let rows = surface(
        &view,
        &weights,
        args.axis,
        (args.min, args.max, args.steps),
        &beta_fixed,
        args.method.nu,
    )?;

    let mut w = csv::Writer::from_path(&args.output).map_err(|e| Error::Csv(e.to_string()))?;
    let mut header = vec!["beta_axis".to_string(), "objective".into()];
    for name in beta_names(dataset.p) {
        header.push(format!("score_{name}"));
    }
    w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
    for row in &rows {
        let mut rec = vec![format!("{}", row.beta_axis), format!("{}", row.objective)];
        rec.extend(row.score.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))?;

    let mut m = Manifest::new();
    m.push("command", "surface");
    m.push("weights", weights.method.label());
    m.push("axis", args.axis);
    m.push("steps", args.steps);
    m.push("output", args.output.display());
    m.emit(out, None)
}

/// Dispatches a parsed command, writing the manifest to `out`.
pub fn run(cli: &Cli, out: &mut dyn IoWrite) -> Result<()> {
    match &cli.command {
        Command::Fit(args) => cmd_fit(args, out),
        Command::Bootstrap(args) => cmd_bootstrap(args, out),
        Command::Simulate(args) => cmd_simulate(args, out),
        Command::Surface(args) => cmd_surface(args, out),
    }
}
