//! `idlfm`: simulate, fit, interpolate, tune and benchmark dynamic latent
//! factor models from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 divergence.

mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use idlfm_core::data::{read_panel_csv, standardize};
use idlfm_core::eval::{run_benchmark, BenchmarkConfig, Method};
use idlfm_core::model::ModelFile;
use idlfm_core::optim::fit;
use idlfm_core::simgen::{generate, Scenario, ScenarioSpec};
use idlfm_core::tuning::tune;
use idlfm_core::{Error, FitConfig, TuneGrid};

use config::{overlay, ConfigFile, FitFlags, ScenarioFlags, TuneFlags};

#[derive(Debug, Parser)]
#[command(name = "idlfm", version, about = "Individualized dynamic latent factor model for irregular time series")]
struct Cli {
    /// JSON file with `fit`, `tune`, `scenario` and `benchmark` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Print progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a simulated panel: train.csv, test.csv and truth.csv.
    Simulate(SimulateArgs),
    /// Fit a model to a training panel and write it as JSON.
    Fit(FitArgs),
    /// Predict from a fitted model at query points or on a grid.
    Interpolate(InterpolateArgs),
    /// Grid-search penalty, rank and step size on a validation split.
    Tune(TuneArgs),
    /// Replicated simulation study comparing methods.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: Scenario,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shrink to I = 10, T = 200.
    #[arg(long)]
    desk_scale: bool,
    #[command(flatten)]
    scenario_flags: ScenarioFlags,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    train: PathBuf,
    /// Model JSON output.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV output.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Right end of the time domain; defaults to the largest observed time.
    #[arg(long)]
    horizon: Option<f64>,
    /// Fit on the raw scale instead of standardizing each cell.
    #[arg(long)]
    no_standardize: bool,
    /// Seed of the random initialization.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Debug, Args)]
struct InterpolateArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV with header `subject,series,time`.
    #[arg(long, conflicts_with = "grid", required_unless_present = "grid")]
    query: Option<PathBuf>,
    /// Predict every subject and series on this many evenly spaced times.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Keep predictions on the standardized scale.
    #[arg(long)]
    standardized: bool,
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[arg(long)]
    train: PathBuf,
    /// Tune-report CSV output.
    #[arg(long)]
    out: PathBuf,
    /// Name of the series scored on the validation split (default: last).
    #[arg(long)]
    target_series: Option<String>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    no_standardize: bool,
    /// Seed of the validation split and of every candidate's initialization.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    grid: TuneFlags,
    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Debug, Args)]
struct BenchmarkArgs {
    #[arg(long)]
    scenario: Scenario,
    /// Replications (default 5 at desk scale, 50 otherwise).
    #[arg(long)]
    reps: Option<usize>,
    /// Base seed; replication r uses seed + r.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// I = 10, T = 200, M = 60, 5 replications.
    #[arg(long)]
    desk_scale: bool,
    /// Worker threads for replications.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "idlfm,spline-baseline,mean-fill")]
    methods: Vec<Method>,
    /// Use the fit settings as given instead of tuning each replication.
    #[arg(long)]
    no_tune: bool,
    /// Write wall_ms as 0 so that repeated runs are byte-identical.
    #[arg(long)]
    omit_timing: bool,
    #[arg(long)]
    out: PathBuf,
    /// Markdown summary output.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[command(flatten)]
    scenario_flags: ScenarioFlags,
    #[command(flatten)]
    grid: TuneFlags,
    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Diverged(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Diverged(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Diverged(m) => m,
        }
    }

    fn data(context: impl AsRef<Path>, e: impl std::fmt::Display) -> Self {
        Failure::Data(format!("{}: {e}", context.as_ref().display()))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { .. } | Error::AllDiverged => Failure::Diverged(e.to_string()),
            e if e.is_data_error() => Failure::Data(e.to_string()),
            e => Failure::Usage(e.to_string()),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::data(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Failure::data(path, e))
}

/// Writes `# config: {json}` as the first line of a CSV artifact.
fn echo_config<W: Write, T: Serialize>(w: &mut W, config: &T) -> CliResult {
    let json = serde_json::to_string(config).map_err(|e| Failure::Data(e.to_string()))?;
    writeln!(w, "# config: {json}").map_err(|e| Failure::Data(e.to_string()))
}

fn finish<W: Write>(mut w: W, path: &Path) -> CliResult {
    w.flush().map_err(|e| Failure::data(path, e))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return ExitCode::from(if is_help { 0 } else { 1 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?,
        None => ConfigFile::default(),
    };
    let verbose = cli.verbose;
    match cli.command {
        Command::Simulate(args) => simulate(args, &file, verbose),
        Command::Fit(args) => fit_cmd(args, &file, verbose),
        Command::Interpolate(args) => interpolate(args, verbose),
        Command::Tune(args) => tune_cmd(args, &file, verbose),
        Command::Benchmark(args) => benchmark(args, &file, verbose),
    }
}

fn simulate(args: SimulateArgs, file: &ConfigFile, verbose: bool) -> CliResult {
    let base = if args.desk_scale {
        ScenarioSpec::desk(args.scenario)
    } else {
        ScenarioSpec::full(args.scenario)
    };
    let mut spec = overlay(&base, file.scenario.as_ref(), "scenario").map_err(Failure::Usage)?;
    spec.scenario = args.scenario;
    args.scenario_flags.apply(&mut spec);
    spec.seed = args.seed;
    let sim = generate(&spec)?;

    for (name, panel) in [("train.csv", &sim.train), ("test.csv", &sim.test)] {
        let path = args.out_dir.join(name);
        let mut w = create(&path)?;
        echo_config(&mut w, &spec)?;
        panel.write_csv(&mut w).map_err(|e| Failure::data(&path, e))?;
        finish(w, &path)?;
    }

    let path = args.out_dir.join("truth.csv");
    let mut w = create(&path)?;
    echo_config(&mut w, &spec)?;
    writeln!(w, "subject,series,time,psi").map_err(|e| Failure::data(&path, e))?;
    for (i, j, t, psi) in sim.truth.psi_rows() {
        writeln!(w, "{},{},{},{}", sim.train.subject_ids()[i], sim.train.series_ids()[j], t, psi)
            .map_err(|e| Failure::data(&path, e))?;
    }
    finish(w, &path)?;
    if verbose {
        eprintln!(
            "{}: {} training and {} test observations written to {}",
            spec.scenario,
            sim.train.total_observations(),
            sim.test.total_observations(),
            args.out_dir.display()
        );
    }
    Ok(())
}

fn fit_cmd(args: FitArgs, file: &ConfigFile, verbose: bool) -> CliResult {
    let mut cfg: FitConfig = overlay(&FitConfig::default(), file.fit.as_ref(), "fit").map_err(Failure::Usage)?;
    args.fit.apply(&mut cfg);
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let raw = read_panel_csv(&args.train, args.horizon).map_err(|e| Failure::data(&args.train, e))?;
    let (panel, stats) = if args.no_standardize {
        (raw, None)
    } else {
        let (p, s) = standardize(&raw);
        (p, Some(s))
    };
    let (params, report) = fit(&panel, &cfg)?;
    if verbose {
        eprintln!(
            "fit: {} iterations, converged={}, final loss {:.6}, {:.2?}",
            report.iterations_run, report.converged, report.final_loss, report.wall_time
        );
    }
    let model = ModelFile::new(
        &params,
        panel.subject_ids().to_vec(),
        panel.series_ids().to_vec(),
        stats,
        cfg.clone(),
    )?;
    let mut w = create(&args.out)?;
    model.write_json(&mut w).map_err(|e| Failure::data(&args.out, e))?;
    finish(w, &args.out)?;

    if let Some(path) = &args.trace {
        let mut w = create(path)?;
        echo_config(&mut w, &cfg)?;
        writeln!(w, "iteration,loss").map_err(|e| Failure::data(path, e))?;
        for (s, l) in report.loss_trace.iter().enumerate() {
            writeln!(w, "{s},{l}").map_err(|e| Failure::data(path, e))?;
        }
        finish(w, path)?;
    }
    Ok(())
}

struct Query {
    subject: usize,
    series: usize,
    time: f64,
}

fn read_queries(path: &Path, model: &ModelFile) -> CliResult<Vec<Query>> {
    let file = File::open(path).map_err(|e| Failure::data(path, e))?;
    let mut rdr = csv_reader(file);
    let header = rdr.headers().map_err(|e| Failure::data(path, e))?.clone();
    if header.iter().ne(["subject", "series", "time"]) {
        return Err(Failure::data(path, "expected header 'subject,series,time'"));
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Failure::data(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |msg: String| Failure::data(path, format!("line {line}: {msg}"));
        if record.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", record.len())));
        }
        let subject = model
            .subject_ids
            .iter()
            .position(|s| s == &record[0])
            .ok_or_else(|| bad(format!("unknown subject '{}'", &record[0])))?;
        let series = model
            .series_ids
            .iter()
            .position(|s| s == &record[1])
            .ok_or_else(|| bad(format!("unknown series '{}'", &record[1])))?;
        let time: f64 = record[2].parse().map_err(|_| bad(format!("invalid time '{}'", &record[2])))?;
        out.push(Query { subject, series, time });
    }
    Ok(out)
}

fn csv_reader<R: std::io::Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(r)
}

fn interpolate(args: InterpolateArgs, verbose: bool) -> CliResult {
    let file = File::open(&args.model).map_err(|e| Failure::data(&args.model, e))?;
    let model = ModelFile::read_json(BufReader::new(file)).map_err(|e| Failure::data(&args.model, e))?;
    let params = model.params().map_err(|e| Failure::data(&args.model, e))?;

    let queries = match (&args.query, args.grid) {
        (Some(path), _) => read_queries(path, &model)?,
        (None, Some(n)) => {
            if n < 2 {
                return Err(Failure::Usage("--grid needs at least 2 points".into()));
            }
            let end = params.basis.domain_end();
            let times: Vec<f64> = (0..n).map(|k| end * k as f64 / (n - 1) as f64).collect();
            let mut q = Vec::new();
            for subject in 0..model.num_subjects {
                for series in 0..model.num_series {
                    q.extend(times.iter().map(|&time| Query { subject, series, time }));
                }
            }
            q
        }
        (None, None) => return Err(Failure::Usage("either --query or --grid is required".into())),
    };

    let mut w = create(&args.out)?;
    echo_config(&mut w, &model.config)?;
    writeln!(w, "subject,series,time,value").map_err(|e| Failure::data(&args.out, e))?;
    for q in &queries {
        let mut value = params.predict(q.subject, q.series, q.time).map_err(|e| Failure::data(&args.out, e))?;
        if let (Some(stats), false) = (&model.standardization, args.standardized) {
            value = idlfm_core::destandardize(&[value], stats, q.subject, q.series)?[0];
        }
        writeln!(
            w,
            "{},{},{},{}",
            model.subject_ids[q.subject], model.series_ids[q.series], q.time, value
        )
        .map_err(|e| Failure::data(&args.out, e))?;
    }
    finish(w, &args.out)?;
    if verbose {
        eprintln!("interpolate: {} predictions written to {}", queries.len(), args.out.display());
    }
    Ok(())
}

fn tune_cmd(args: TuneArgs, file: &ConfigFile, verbose: bool) -> CliResult {
    let mut cfg: FitConfig = overlay(&FitConfig::default(), file.fit.as_ref(), "fit").map_err(Failure::Usage)?;
    args.fit.apply(&mut cfg);
    let mut grid: TuneGrid = overlay(&TuneGrid::default(), file.tune.as_ref(), "tune").map_err(Failure::Usage)?;
    args.grid.apply(&mut grid);
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        grid.seed = seed;
    }

    let raw = read_panel_csv(&args.train, args.horizon).map_err(|e| Failure::data(&args.train, e))?;
    if let Some(name) = &args.target_series {
        let j = raw
            .series_index(name)
            .ok_or_else(|| Failure::Usage(format!("unknown target series '{name}'")))?;
        grid.target_series = Some(j);
    }
    let panel = if args.no_standardize { raw } else { standardize(&raw).0 };
    let result = tune(&panel, &grid, &cfg)?;
    if verbose {
        eprintln!(
            "tune: lambda={} rank={} step={} val_mse={:.6}",
            result.best_lambda, result.best_rank, result.best_step, result.best_val_mse
        );
    }
    let mut w = create(&args.out)?;
    echo_config(&mut w, &serde_json::json!({ "fit": cfg, "tune": grid }))?;
    result.write_csv(&mut w).map_err(|e| Failure::data(&args.out, e))?;
    finish(w, &args.out)
}

fn benchmark(args: BenchmarkArgs, file: &ConfigFile, verbose: bool) -> CliResult {
    let base = if args.desk_scale {
        ScenarioSpec::desk(args.scenario)
    } else {
        ScenarioSpec::full(args.scenario)
    };
    let mut spec = overlay(&base, file.scenario.as_ref(), "scenario").map_err(Failure::Usage)?;
    spec.scenario = args.scenario;
    args.scenario_flags.apply(&mut spec);
    spec.seed = args.seed;

    let preset = BenchmarkConfig {
        fit: FitConfig {
            num_basis: if args.desk_scale { 60 } else { 300 },
            ..FitConfig::default()
        },
        ..BenchmarkConfig::default()
    };
    let mut config: BenchmarkConfig =
        overlay(&preset, file.benchmark.as_ref(), "benchmark").map_err(Failure::Usage)?;
    config.fit = overlay(&config.fit, file.fit.as_ref(), "fit").map_err(Failure::Usage)?;
    args.fit.apply(&mut config.fit);
    if args.no_tune {
        config.tune = None;
    } else {
        let grid = config.tune.clone().unwrap_or_default();
        let mut grid: TuneGrid = overlay(&grid, file.tune.as_ref(), "tune").map_err(Failure::Usage)?;
        args.grid.apply(&mut grid);
        config.tune = Some(grid);
    }
    config.record_timing = !args.omit_timing;
    let reps = args.reps.unwrap_or(if args.desk_scale { 5 } else { 50 });

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    if verbose {
        eprintln!(
            "benchmark: {} x {} replications on {} threads",
            spec.scenario,
            reps,
            pool.current_num_threads()
        );
    }
    let report = pool.install(|| run_benchmark(&spec, &args.methods, reps, &config))?;

    let echo = serde_json::json!({ "scenario": spec, "benchmark": config, "replications": reps });
    let mut w = create(&args.out)?;
    echo_config(&mut w, &echo)?;
    report.write_csv(&mut w).map_err(|e| Failure::data(&args.out, e))?;
    finish(w, &args.out)?;

    if let Some(path) = &args.summary {
        let mut w = create(path)?;
        report.write_markdown(&mut w).map_err(|e| Failure::data(path, e))?;
        let pretty = serde_json::to_string_pretty(&echo).map_err(|e| Failure::Data(e.to_string()))?;
        writeln!(w, "\n<details><summary>Configuration</summary>\n\n```json\n{pretty}\n```\n\n</details>")
            .map_err(|e| Failure::data(path, e))?;
        finish(w, path)?;
    }
    if verbose {
        for s in &report.summaries {
            eprintln!(
                "{:>16}: train {:.4} ({:.4})  test {:.4} ({:.4})",
                s.method.as_str(),
                s.train_mean,
                s.train_se,
                s.test_mean,
                s.test_se
            );
        }
    }
    Ok(())
}
