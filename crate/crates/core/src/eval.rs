//! Interpolation error metrics and replicated benchmark runs.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{fit_spline_tuned, predict_spline, DEFAULT_SPLINE_LAMBDAS};
use crate::bspline::BSplineBasis;
use crate::data::ObservationPanel;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::optim::{fit, FitConfig};
use crate::simgen::{generate, GroundTruth, ScenarioSpec};
use crate::tuning::{tune, TuneGrid};

/// Mean of squared differences.
pub fn mse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput);
    }
    if predictions.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let sse: f64 = predictions.iter().zip(targets).map(|(p, y)| (p - y).powi(2)).sum();
    Ok(sse / predictions.len() as f64)
}

/// MSE of the model over every observation of one series in `panel`,
/// pooled over subjects.
pub fn series_mse(params: &ModelParams, panel: &ObservationPanel, series: usize) -> Result<f64> {
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for i in 0..panel.num_subjects() {
        for o in panel.cell(i, series) {
            preds.push(params.predict(i, series, o.time)?);
            targets.push(o.value);
        }
    }
    mse(&preds, &targets)
}

/// Mean squared distance between the fitted surface and the noiseless truth
/// over every subject, series and grid time.
pub fn integrated_squared_error(params: &ModelParams, truth: &GroundTruth) -> Result<f64> {
    let grid: Vec<f64> = (1..=truth.horizon).map(|t| t as f64).collect();
    let fitted = params.predict_grid(&grid)?;
    let mut preds = Vec::with_capacity(truth.psi.len());
    for subject in &fitted {
        for series in subject {
            preds.extend_from_slice(series);
        }
    }
    mse(&preds, &truth.psi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Idlfm,
    SplineBaseline,
    /// Predicts each subject's training mean of the target series.
    MeanFill,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Idlfm, Method::SplineBaseline, Method::MeanFill];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Idlfm => "idlfm",
            Method::SplineBaseline => "spline-baseline",
            Method::MeanFill => "mean-fill",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Method::Idlfm => "IDLFM",
            Method::SplineBaseline => "SS",
            Method::MeanFill => "Mean",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.as_str().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    /// Fit settings for IDLFM; `num_basis` and `degree` are shared with the
    /// spline baseline.
    pub fit: FitConfig,
    /// When set, IDLFM hyperparameters are re-tuned on every replication.
    pub tune: Option<TuneGrid>,
    pub spline_lambdas: Vec<f64>,
    pub spline_validation_fraction: f64,
    /// Record wall-clock time per fit; when false `wall_ms` is written as 0
    /// so that reports are byte-reproducible.
    pub record_timing: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            tune: Some(TuneGrid::default()),
            spline_lambdas: DEFAULT_SPLINE_LAMBDAS.to_vec(),
            spline_validation_fraction: 0.3,
            record_timing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub scenario: String,
    pub method: Method,
    pub seed: u64,
    pub train_mse: f64,
    pub test_mse: f64,
    pub converged: bool,
    pub iters: usize,
    pub wall_ms: u64,
    /// Test MSE of each subject's target series (NaN where it has no test points).
    pub per_subject_test_mse: Vec<f64>,
}

impl BenchmarkRow {
    /// Rows whose fit diverged carry NaN errors.
    pub fn is_valid(&self) -> bool {
        self.train_mse.is_finite() && self.test_mse.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Replications with finite errors.
    pub replications: usize,
    pub train_mean: f64,
    pub train_se: f64,
    pub test_mean: f64,
    pub test_se: f64,
}

/// Mean and standard error (sample sd / sqrt(n)); the error is NaN for n < 2.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub rows: Vec<BenchmarkRow>,
    pub summaries: Vec<MethodSummary>,
}

impl EvalReport {
    pub fn from_rows(scenario: String, methods: &[Method], rows: Vec<BenchmarkRow>) -> Self {
        let summaries = methods
            .iter()
            .map(|&method| {
                let valid: Vec<&BenchmarkRow> = rows.iter().filter(|r| r.method == method && r.is_valid()).collect();
                let train: Vec<f64> = valid.iter().map(|r| r.train_mse).collect();
                let test: Vec<f64> = valid.iter().map(|r| r.test_mse).collect();
                let (train_mean, train_se) = mean_and_se(&train);
                let (test_mean, test_se) = mean_and_se(&test);
                MethodSummary {
                    method,
                    replications: valid.len(),
                    train_mean,
                    train_se,
                    test_mean,
                    test_se,
                }
            })
            .collect();
        Self {
            scenario,
            rows,
            summaries,
        }
    }

    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn rows_for(&self, method: Method) -> impl Iterator<Item = &BenchmarkRow> {
        self.rows.iter().filter(move |r| r.method == method)
    }

    /// `scenario,method,seed,train_mse,test_mse,converged,iters,wall_ms`
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["scenario", "method", "seed", "train_mse", "test_mse", "converged", "iters", "wall_ms"])?;
        for r in &self.rows {
            w.write_record([
                r.scenario.clone(),
                r.method.to_string(),
                r.seed.to_string(),
                r.train_mse.to_string(),
                r.test_mse.to_string(),
                r.converged.to_string(),
                r.iters.to_string(),
                r.wall_ms.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// A Training / Testing table with `mean (se)` cells.
    pub fn write_markdown<W: Write>(&self, mut w: W) -> Result<()> {
        let reps = self.rows.iter().map(|r| r.seed).collect::<std::collections::BTreeSet<_>>().len();
        writeln!(w, "## {} ({} replications)", self.scenario, reps)?;
        writeln!(w)?;
        writeln!(w, "| MSE | Training | Testing |")?;
        writeln!(w, "|---|---|---|")?;
        let cell = |mean: f64, se: f64| {
            if mean.is_nan() {
                "NA".to_string()
            } else if se.is_nan() {
                format!("{mean:.3}")
            } else {
                format!("{mean:.3} ({se:.3})")
            }
        };
        for s in &self.summaries {
            writeln!(
                w,
                "| {} | {} | {} |",
                s.method.label(),
                cell(s.train_mean, s.train_se),
                cell(s.test_mean, s.test_se)
            )?;
        }
        writeln!(w)?;
        writeln!(w, "Standard errors in parentheses. IDLFM: individualized dynamic latent factor model.")?;
        if self.summaries.iter().any(|s| s.method == Method::SplineBaseline) {
            writeln!(
                w,
                "SS: ridge-penalized cubic B-spline regression per subject, penalty chosen on a validation split \
                 (stands in for an automatic-knot smoothing spline)."
            )?;
        }
        if self.summaries.iter().any(|s| s.method == Method::MeanFill) {
            writeln!(w, "Mean: each subject's training mean of the target series.")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub train_mse: f64,
    pub test_mse: f64,
    pub per_subject_test_mse: Vec<f64>,
    pub converged: bool,
    pub iters: usize,
    pub wall_ms: u64,
}

/// Per-subject predictions at the train and test points of the target series.
struct Predictions {
    train: Vec<Vec<f64>>,
    test: Vec<Vec<f64>>,
}

fn score(train: &ObservationPanel, test: &ObservationPanel, target: usize, preds: &Predictions) -> Result<(f64, f64, Vec<f64>)> {
    let flatten = |panel: &ObservationPanel, p: &[Vec<f64>]| {
        let mut yp = Vec::new();
        let mut yt = Vec::new();
        for (i, pi) in p.iter().enumerate() {
            yp.extend_from_slice(pi);
            yt.extend(panel.cell(i, target).iter().map(|o| o.value));
        }
        (yp, yt)
    };
    let (p, y) = flatten(train, &preds.train);
    let train_mse = mse(&p, &y)?;
    let (p, y) = flatten(test, &preds.test);
    let test_mse = mse(&p, &y)?;
    let per_subject = preds
        .test
        .iter()
        .enumerate()
        .map(|(i, pi)| {
            let y: Vec<f64> = test.cell(i, target).iter().map(|o| o.value).collect();
            mse(pi, &y).unwrap_or(f64::NAN)
        })
        .collect();
    Ok((train_mse, test_mse, per_subject))
}

fn predict_with<F>(train: &ObservationPanel, test: &ObservationPanel, target: usize, mut f: F) -> Result<Predictions>
where
    F: FnMut(usize, f64) -> Result<f64>,
{
    let mut out = Predictions {
        train: Vec::new(),
        test: Vec::new(),
    };
    for i in 0..train.num_subjects() {
        out.train.push(train.cell(i, target).iter().map(|o| f(i, o.time)).collect::<Result<_>>()?);
        out.test.push(test.cell(i, target).iter().map(|o| f(i, o.time)).collect::<Result<_>>()?);
    }
    Ok(out)
}

/// Fits one method on `train` and scores it on the target (last) series of
/// `train` and `test`. A diverged IDLFM fit yields NaN errors rather than an
/// error.
pub fn evaluate_method(
    method: Method,
    train: &ObservationPanel,
    test: &ObservationPanel,
    config: &BenchmarkConfig,
    seed: u64,
) -> Result<MethodOutcome> {
    let target = train.num_series() - 1;
    let started = Instant::now();
    let mut converged = true;
    let mut iters = 0;

    let preds = match method {
        Method::MeanFill => {
            let means: Vec<f64> = (0..train.num_subjects())
                .map(|i| {
                    let c = train.cell(i, target);
                    if c.is_empty() {
                        0.0
                    } else {
                        c.iter().map(|o| o.value).sum::<f64>() / c.len() as f64
                    }
                })
                .collect();
            predict_with(train, test, target, |i, _| Ok(means[i]))?
        }
        Method::SplineBaseline => {
            let basis = BSplineBasis::new(train.domain_end(), config.fit.num_basis, config.fit.degree)?;
            let fits = (0..train.num_subjects())
                .map(|i| {
                    let points: Vec<(f64, f64)> = train.cell(i, target).iter().map(|o| (o.time, o.value)).collect();
                    if points.len() < 2 {
                        let mean = points.first().map_or(0.0, |p| p.1);
                        return Ok(Err(mean));
                    }
                    fit_spline_tuned(
                        &points,
                        &basis,
                        &config.spline_lambdas,
                        config.spline_validation_fraction,
                        seed.wrapping_add(i as u64),
                    )
                    .map(Ok)
                })
                .collect::<Result<Vec<_>>>()?;
            predict_with(train, test, target, |i, t| match &fits[i] {
                Ok(fit) => predict_spline(fit, t),
                Err(mean) => Ok(*mean),
            })?
        }
        Method::Idlfm => {
            let base = FitConfig {
                seed,
                ..config.fit.clone()
            };
            let fitted = config
                .tune
                .as_ref()
                .map(|grid| {
                    let grid = TuneGrid {
                        seed,
                        target_series: Some(target),
                        ..grid.clone()
                    };
                    tune(train, &grid, &base).map(|r| r.apply(&base))
                })
                .unwrap_or(Ok(base))
                .and_then(|cfg| fit(train, &cfg));
            match fitted {
                Ok((params, report)) => {
                    converged = report.converged;
                    iters = report.iterations_run;
                    predict_with(train, test, target, |i, t| params.predict(i, target, t))?
                }
                Err(Error::Divergence { iteration, .. }) => {
                    return Ok(diverged_outcome(train.num_subjects(), iteration, started, config));
                }
                Err(Error::AllDiverged) => {
                    return Ok(diverged_outcome(train.num_subjects(), 0, started, config));
                }
                Err(e) => return Err(e),
            }
        }
    };

    let (train_mse, test_mse, per_subject_test_mse) = score(train, test, target, &preds)?;
    Ok(MethodOutcome {
        train_mse,
        test_mse,
        per_subject_test_mse,
        converged,
        iters,
        wall_ms: elapsed_ms(started, config),
    })
}

fn elapsed_ms(started: Instant, config: &BenchmarkConfig) -> u64 {
    if config.record_timing {
        started.elapsed().as_millis() as u64
    } else {
        0
    }
}

fn diverged_outcome(num_subjects: usize, iters: usize, started: Instant, config: &BenchmarkConfig) -> MethodOutcome {
    MethodOutcome {
        train_mse: f64::NAN,
        test_mse: f64::NAN,
        per_subject_test_mse: vec![f64::NAN; num_subjects],
        converged: false,
        iters,
        wall_ms: elapsed_ms(started, config),
    }
}

/// Runs `replications` independent simulations of `spec` (seeds
/// `spec.seed + 1 ..= spec.seed + replications`), fits every method on each
/// and aggregates. Replications run in parallel on the current rayon pool;
/// rows come back in seed order.
pub fn run_benchmark(
    spec: &ScenarioSpec,
    methods: &[Method],
    replications: usize,
    config: &BenchmarkConfig,
) -> Result<EvalReport> {
    if replications == 0 {
        return Err(Error::InvalidArgument("at least one replication is required".into()));
    }
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no methods requested".into()));
    }
    spec.validate()?;
    config.fit.validate()?;
    let seeds: Vec<u64> = (1..=replications as u64).map(|r| spec.seed + r).collect();
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let sim = generate(&ScenarioSpec { seed, ..spec.clone() })?;
            methods
                .iter()
                .map(|&method| {
                    let out = evaluate_method(method, &sim.train, &sim.test, config, seed)?;
                    Ok(BenchmarkRow {
                        scenario: spec.scenario.to_string(),
                        method,
                        seed,
                        train_mse: out.train_mse,
                        test_mse: out.test_mse,
                        converged: out.converged,
                        iters: out.iters,
                        wall_ms: out.wall_ms,
                        per_subject_test_mse: out.per_subject_test_mse,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = per_seed.into_iter().flatten().collect();
    Ok(EvalReport::from_rows(spec.scenario.to_string(), methods, rows))
}
