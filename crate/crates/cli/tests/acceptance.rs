//! Acceptance checks, one line per criterion. Exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use idlfm_core::eval::{integrated_squared_error, EvalReport};
use idlfm_core::optim::{grad_f, grad_w, loss, Objective};
use idlfm_core::tuning::TunePhase;
use idlfm_core::{
    destandardize, fit, generate, read_panel_csv, run_benchmark, standardize, tune, BSplineBasis, BenchmarkConfig,
    FitConfig, Method, ModelFile, ModelParams, Observation, ObservationPanel, Scenario, ScenarioSpec, TuneGrid,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: usize = 5;

struct Check {
    pass: bool,
    detail: String,
}

type Outcome = Result<Check, String>;

fn run(number: u32, name: &str, limit: Option<Duration>, body: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let outcome = body();
    let elapsed = started.elapsed();
    let in_time = limit.is_none_or(|l| elapsed < l);
    let (pass, detail) = match outcome {
        Ok(c) => (c.pass && in_time, c.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let timing = match limit {
        Some(l) => format!("{:.2} s (limit {} s)", elapsed.as_secs_f64(), l.as_secs()),
        None => format!("{:.2} s", elapsed.as_secs_f64()),
    };
    println!(
        "[{}] criterion {number} {name}: {detail}; {timing}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn e(err: impl std::fmt::Display) -> String {
    err.to_string()
}

fn desk_config() -> BenchmarkConfig {
    BenchmarkConfig {
        fit: FitConfig { num_basis: 60, ..FitConfig::default() },
        record_timing: false,
        ..BenchmarkConfig::default()
    }
}

fn random_panel(rng: &mut ChaCha8Rng, subjects: usize, series: usize, max_obs: usize, end: f64) -> ObservationPanel {
    let cells = (0..subjects)
        .map(|_| {
            (0..series)
                .map(|_| {
                    let k = rng.random_range(1..=max_obs);
                    (0..k)
                        .map(|_| Observation::new(rng.random_range(0.0..=end), rng.random_range(-2.0..2.0)))
                        .collect()
                })
                .collect()
        })
        .collect();
    let ids = |p: &str, n: usize| (0..n).map(|k| format!("{p}{k}")).collect();
    ObservationPanel::new(ids("s", subjects), ids("y", series), end, cells).unwrap()
}

fn random_params(rng: &mut ChaCha8Rng, basis: BSplineBasis, subjects: usize, series: usize, rank: usize) -> ModelParams {
    let m = basis.num_basis();
    let factors = DMatrix::from_fn(series, rank, |_, _| rng.random_range(-1.0..1.0));
    let weights = (0..subjects).map(|_| DMatrix::from_fn(rank, m, |_, _| rng.random_range(-1.0..1.0))).collect();
    ModelParams::new(basis, factors, weights).unwrap()
}

fn gradient_oracle() -> Outcome {
    const H: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for instance in 0..20 {
        let (subjects, series) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let rank = rng.random_range(1..=3);
        let m = rng.random_range(4..=6);
        let panel = random_panel(&mut rng, subjects, series, 6, 10.0);
        let params = random_params(&mut rng, BSplineBasis::new(10.0, m, 3).map_err(e)?, subjects, series, rank);
        let lambda = if instance % 2 == 0 { 0.0 } else { 0.5 };
        let fd = |nudge: &dyn Fn(&mut ModelParams, f64)| -> Result<f64, String> {
            let (mut plus, mut minus) = (params.clone(), params.clone());
            nudge(&mut plus, H);
            nudge(&mut minus, -H);
            Ok((loss(&panel, &plus, lambda).map_err(e)? - loss(&panel, &minus, lambda).map_err(e)?) / (2.0 * H))
        };
        let mut blocks: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        let gf = grad_f(&panel, &params, lambda).map_err(e)?;
        let mut pair = (Vec::new(), Vec::new());
        for j in 0..series {
            for r in 0..rank {
                pair.0.push(gf[(j, r)]);
                pair.1.push(fd(&|p, d| p.factors[(j, r)] += d)?);
            }
        }
        blocks.push(pair);
        for i in 0..subjects {
            let gw = grad_w(&panel, &params, lambda, i).map_err(e)?;
            let mut pair = (Vec::new(), Vec::new());
            for r in 0..rank {
                for k in 0..m {
                    pair.0.push(gw[(r, k)]);
                    pair.1.push(fd(&|p, d| p.weights[i][(r, k)] += d)?);
                }
            }
            blocks.push(pair);
        }
        for (analytic, numeric) in blocks {
            let scale = numeric.iter().fold(1e-8f64, |a, b| a.max(b.abs()));
            let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(diff / scale);
        }
    }
    Ok(Check {
        pass: worst < 1e-6,
        detail: format!("max relative error {worst:.2e} over 20 instances (< 1e-6)"),
    })
}

fn basis_properties() -> Outcome {
    let mut worst_sum = 0.0f64;
    let mut max_nonzero = 0;
    let mut endpoints = true;
    let cases = [(1000.0, 300, 3), (200.0, 60, 3), (10.0, 7, 2), (1.0, 4, 3)];
    for (end, m, degree) in cases {
        let basis = BSplineBasis::new(end, m, degree).map_err(e)?;
        for k in 0..1000 {
            let t = end * k as f64 / 999.0;
            let values = basis.eval(t).map_err(e)?;
            worst_sum = worst_sum.max((values.iter().sum::<f64>() - 1.0).abs());
            let nonzero = values.iter().filter(|v| **v != 0.0).count();
            max_nonzero = max_nonzero.max(nonzero);
            if nonzero > degree + 1 {
                return Ok(Check { pass: false, detail: format!("{nonzero} nonzeros at t = {t} (M = {m})") });
            }
        }
        let first = basis.eval(0.0).map_err(e)?;
        let last = basis.eval(end).map_err(e)?;
        endpoints &= first[0] == 1.0 && first[1..].iter().all(|v| *v == 0.0);
        endpoints &= last[m - 1] == 1.0 && last[..m - 1].iter().all(|v| *v == 0.0);
    }
    Ok(Check {
        pass: worst_sum < 1e-10 && endpoints,
        detail: format!(
            "max |sum - 1| = {worst_sum:.1e} (< 1e-10), at most {max_nonzero} nonzeros (<= degree + 1), endpoints exact: {endpoints}"
        ),
    })
}

fn noiseless_recovery() -> Outcome {
    let f = [1.0, -0.6];
    let theta = |i: usize, t: f64| (t / 8.0).sin() + 0.5 * (t / 20.0).cos() + 0.3 * i as f64;
    let cells = (0..2)
        .map(|i| {
            f.iter()
                .map(|fj| (0..=50).map(|t| Observation::new(t as f64, fj * theta(i, t as f64))).collect())
                .collect()
        })
        .collect();
    let panel = ObservationPanel::new(vec!["a".into(), "b".into()], vec!["x".into(), "y".into()], 50.0, cells)
        .map_err(e)?;
    let config = FitConfig {
        rank: 1,
        lambda: 1e-8,
        step_size: 0.02,
        num_basis: 20,
        stop_eps: 1e-9,
        max_iters: 5000,
        ..FitConfig::default()
    };
    let (params, report) = fit(&panel, &config).map_err(e)?;
    let mut sse = 0.0;
    for (i, j, o) in panel.iter() {
        sse += (params.predict(i, j, o.time).map_err(e)? - o.value).powi(2);
    }
    let mse = sse / panel.total_observations() as f64;
    Ok(Check {
        pass: mse <= 1e-3 && report.iterations_run <= 5000,
        detail: format!("training MSE {mse:.2e} (<= 1e-3) after {} iterations (<= 5000)", report.iterations_run),
    })
}

fn scale_indeterminacy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sim = generate(&ScenarioSpec::desk(Scenario::S1_3).with_seed(4)).map_err(e)?;
    let basis = BSplineBasis::new(200.0, 60, 3).map_err(e)?;
    let params = random_params(&mut rng, basis.clone(), 10, 5, 3);
    let objective = Objective::new(&sim.train, &basis).map_err(e)?;
    let reference = objective.data_loss(&params).map_err(e)?;
    let grid: Vec<f64> = (0..=400).map(|k| k as f64 * 0.5).collect();
    let base = params.predict_grid(&grid).map_err(e)?;
    let scale = base.iter().flatten().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
    let (mut worst_pred, mut worst_point, mut worst_loss) = (0.0f64, 0.0f64, 0.0f64);
    for c in [-2.0, 0.5, 10.0] {
        let scaled = ModelParams::new(
            basis.clone(),
            &params.factors * c,
            params.weights.iter().map(|w| w / c).collect(),
        )
        .map_err(e)?;
        let preds = scaled.predict_grid(&grid).map_err(e)?;
        for (a, b) in base.iter().flatten().flatten().zip(preds.iter().flatten().flatten()) {
            worst_pred = worst_pred.max((a - b).abs() / scale);
            worst_point = worst_point.max((a - b).abs() / a.abs());
        }
        let l = objective.data_loss(&scaled).map_err(e)?;
        worst_loss = worst_loss.max((l - reference).abs() / reference);
    }
    Ok(Check {
        pass: worst_pred <= 1e-12 && worst_loss <= 1e-10,
        detail: format!(
            "prediction change relative to max |prediction| {worst_pred:.1e} (<= 1e-12; pointwise {worst_point:.1e}), data loss relative change {worst_loss:.1e} (<= 1e-10)"
        ),
    })
}

fn desk_band(report: &EvalReport) -> Outcome {
    let summary = report.summary(Method::Idlfm).ok_or("no IDLFM rows")?;
    Ok(Check {
        pass: (0.25..=0.70).contains(&summary.test_mean) && summary.replications == SEEDS,
        detail: format!(
            "IDLFM mean test MSE {:.4} (se {:.4}) over {} tuned replications (band [0.25, 0.70])",
            summary.test_mean, summary.test_se, summary.replications
        ),
    })
}

fn wins(report: &EvalReport) -> usize {
    let ours: Vec<_> = report.rows_for(Method::Idlfm).collect();
    let theirs: Vec<_> = report.rows_for(Method::SplineBaseline).collect();
    ours.iter().zip(&theirs).filter(|(a, b)| a.seed == b.seed && a.test_mse < b.test_mse).count()
}

fn ordering(s13: &EvalReport, s11: &EvalReport) -> Outcome {
    let (w13, w11) = (wins(s13), wins(s11));
    let mean = |r: &EvalReport, m| r.summary(m).map_or(f64::NAN, |s| s.test_mean);
    Ok(Check {
        pass: w13 >= 4 && w11 >= 4,
        detail: format!(
            "IDLFM beats spline baseline in {w11}/5 seeds on S1.1 ({:.3} vs {:.3}) and {w13}/5 on S1.3 ({:.3} vs {:.3}) (need >= 4)",
            mean(s11, Method::Idlfm),
            mean(s11, Method::SplineBaseline),
            mean(s13, Method::Idlfm),
            mean(s13, Method::SplineBaseline),
        ),
    })
}

fn rank_sensitivity() -> Outcome {
    let grid = TuneGrid {
        lambda_candidates: vec![0.1],
        rank_candidates: vec![1, 3],
        step_candidates: vec![1e-4],
        ..TuneGrid::default()
    };
    let (mut r1, mut r3) = (0.0, 0.0);
    for seed in 1..=SEEDS as u64 {
        let sim = generate(&ScenarioSpec::desk(Scenario::S1_1).with_seed(seed)).map_err(e)?;
        let base = FitConfig { seed, ..FitConfig::default() };
        let result = tune(&sim.train, &TuneGrid { seed, ..grid.clone() }, &base).map_err(e)?;
        let at = |rank| {
            result
                .rows
                .iter()
                .find(|r| r.phase == TunePhase::RankStep && r.rank == rank)
                .map(|r| r.val_mse)
                .unwrap_or(f64::NAN)
        };
        r1 += at(1) / SEEDS as f64;
        r3 += at(3) / SEEDS as f64;
    }
    Ok(Check {
        pass: r3 < r1,
        detail: format!("mean validation MSE rank 3 {r3:.4} < rank 1 {r1:.4}"),
    })
}

fn missingness() -> Outcome {
    let config = BenchmarkConfig { tune: None, ..desk_config() };
    let mut means = Vec::new();
    for scenario in [Scenario::Mcar, Scenario::Mar, Scenario::Mnar] {
        let report = run_benchmark(&ScenarioSpec::desk(scenario), &[Method::Idlfm], SEEDS, &config).map_err(e)?;
        means.push(report.summary(Method::Idlfm).ok_or("no rows")?.test_mean);
    }
    let mar = (means[1] - means[0]).abs() / means[0];
    let mnar = (means[2] - means[0]) / means[0];
    Ok(Check {
        pass: mar < 0.25 && mnar < 0.40,
        detail: format!(
            "test MSE MCAR {:.4}, MAR {:.4}, MNAR {:.4}; |MAR - MCAR| {:.1}% (< 25%), MNAR excess {:.1}% (< 40%)",
            means[0],
            means[1],
            means[2],
            100.0 * mar,
            100.0 * mnar
        ),
    })
}

fn idlfm(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_idlfm")).args(args).output().map_err(e)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("idlfm {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Result<bool, String> {
    for name in names {
        if std::fs::read(a.join(name)).map_err(e)? != std::fs::read(b.join(name)).map_err(e)? {
            return Ok(false);
        }
    }
    Ok(true)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let s = |p: &Path| p.to_str().unwrap().to_string();
    for d in [&a, &b] {
        idlfm(&["simulate", "--scenario", "S1.2", "--seed", "7", "--desk-scale", "--out-dir", &s(d)])?;
    }
    let simulate = same_files(&a, &b, &["train.csv", "test.csv", "truth.csv"])?;

    let train = s(&a.join("train.csv"));
    for d in [&a, &b] {
        idlfm(&[
            "fit", "--train", &train, "--out", &s(&d.join("model.json")), "--trace", &s(&d.join("trace.csv")),
            "--seed", "3",
        ])?;
    }
    let fitted = same_files(&a, &b, &["model.json", "trace.csv"])?;

    for d in [&a, &b] {
        idlfm(&[
            "benchmark", "--scenario", "S1.3", "--desk-scale", "--reps", "2", "--no-tune", "--omit-timing",
            "--methods", "idlfm,spline-baseline,mean-fill", "--out", &s(&d.join("bench.csv")),
            "--summary", &s(&d.join("bench.md")),
        ])?;
    }
    let bench = same_files(&a, &b, &["bench.csv", "bench.md"])?;

    // Predictions from the reloaded model against the same fit done in memory.
    let query = a.join("query.csv");
    let raw = read_panel_csv(a.join("train.csv"), None).map_err(e)?;
    let mut text = String::from("subject,series,time\n");
    for (i, j, o) in raw.iter().step_by(7) {
        text.push_str(&format!("{},{},{}\n", raw.subject_ids()[i], raw.series_ids()[j], o.time));
    }
    text.push_str("s3,y5,0\ns3,y5,200\ns4,y2,17.25\n");
    std::fs::write(&query, text).map_err(e)?;
    let preds = a.join("preds.csv");
    idlfm(&["interpolate", "--model", &s(&a.join("model.json")), "--query", &s(&query), "--out", &s(&preds)])?;

    let (panel, stats) = standardize(&raw);
    let (params, _) = fit(&panel, &FitConfig { seed: 3, ..FitConfig::default() }).map_err(e)?;
    let file: ModelFile = ModelFile::read_json(std::fs::File::open(a.join("model.json")).map_err(e)?).map_err(e)?;
    let reloaded = file.params().map_err(e)?;
    let mut rows = 0;
    let mut exact = reloaded == params;
    for line in std::fs::read_to_string(&preds).map_err(e)?.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (i, j) = (raw.subject_index(f[0]).unwrap(), raw.series_index(f[1]).unwrap());
        let t: f64 = f[2].parse().map_err(e)?;
        let value: f64 = f[3].parse().map_err(e)?;
        let memory = destandardize(&[params.predict(i, j, t).map_err(e)?], &stats, i, j).map_err(e)?[0];
        exact &= value.to_bits() == memory.to_bits() && value.is_finite();
        rows += 1;
    }
    Ok(Check {
        pass: simulate && fitted && bench && exact && rows > 0,
        detail: format!(
            "byte-identical simulate: {simulate}, fit: {fitted}, benchmark: {bench}; {rows} reloaded predictions bit-exact: {exact}"
        ),
    })
}

fn convergence_trend() -> Outcome {
    let mut means = Vec::new();
    for k in [50usize, 100, 200] {
        let mut total = 0.0;
        for seed in 1..=SEEDS as u64 {
            let spec = ScenarioSpec {
                observe_prob: Some(k as f64 / 200.0),
                ..ScenarioSpec::desk(Scenario::S1_3).with_seed(seed)
            };
            let sim = generate(&spec).map_err(e)?;
            let (params, _) = fit(&sim.train, &FitConfig { seed, ..FitConfig::default() }).map_err(e)?;
            total += integrated_squared_error(&params, &sim.truth).map_err(e)? / SEEDS as f64;
        }
        means.push(total);
    }
    Ok(Check {
        pass: means[0] > means[1] && means[1] > means[2],
        detail: format!(
            "mean integrated squared error K=50: {:.4}, K=100: {:.4}, K=200: {:.4} (strictly decreasing)",
            means[0], means[1], means[2]
        ),
    })
}

fn main() {
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    let mut ok = true;
    ok &= run(1, "gradient oracle", Some(Duration::from_secs(5)), gradient_oracle);
    ok &= run(2, "basis properties", Some(Duration::from_secs(1)), basis_properties);
    ok &= run(3, "noiseless recovery", Some(Duration::from_secs(10)), noiseless_recovery);
    ok &= run(4, "scale indeterminacy", None, scale_indeterminacy);

    let methods = [Method::Idlfm, Method::SplineBaseline];
    let mut s13 = None;
    ok &= run(5, "desk-scale S1.3 band", min(5), || {
        let report = run_benchmark(&ScenarioSpec::desk(Scenario::S1_3), &methods, SEEDS, &desk_config()).map_err(e)?;
        let check = desk_band(&report);
        s13 = Some(report);
        check
    });
    // reuses the S1.3 replications from criterion 5
    ok &= run(6, "method ordering", min(10), || {
        let s13 = s13.as_ref().ok_or("S1.3 runs unavailable")?;
        let s11 = run_benchmark(&ScenarioSpec::desk(Scenario::S1_1), &methods, SEEDS, &desk_config()).map_err(e)?;
        ordering(s13, &s11)
    });
    ok &= run(7, "rank sensitivity", min(10), rank_sensitivity);
    ok &= run(8, "missingness robustness", min(10), missingness);
    ok &= run(9, "determinism and round-trip", None, determinism);
    ok &= run(10, "convergence-rate trend", None, convergence_trend);

    if !ok {
        std::process::exit(1);
    }
}
